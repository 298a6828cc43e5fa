#include <iostream>

#include "atd/cli.hpp"

int main(int argc, char** argv) { return atd::run_cli(argc, argv, std::cout, std::cerr); }
