#include <iostream>

#include "dpvil/cli.hpp"

int main(int argc, char** argv) { return dpvil::run_cli(argc, argv, std::cout, std::cerr); }
