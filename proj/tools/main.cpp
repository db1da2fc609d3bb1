#include <iostream>

#include "deepwaste/cli.hpp"

int main(int argc, char** argv) { return deepwaste::run_cli(argc, argv, std::cout, std::cerr); }
