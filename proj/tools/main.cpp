#include "cli_app.hpp"

int main(int argc, char** argv) { return sdss::cli::run(argc, argv); }
