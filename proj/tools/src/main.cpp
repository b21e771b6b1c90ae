#include <iostream>

#include "trus_cli/cli.hpp"

int main(int argc, char** argv) { return trus::cli::run(argc, argv, std::cout, std::cerr); }
