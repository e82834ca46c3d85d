#include "cli.hpp"

int main(int argc, char** argv) { return mvadapt::cli::cli_dispatch(argc, argv); }
