#include <iostream>

#include "mixssm/cli.hpp"

int main(int argc, char** argv) { return mixssm::run_cli(argc, argv, std::cout, std::cerr); }
