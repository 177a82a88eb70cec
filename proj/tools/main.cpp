#include "cli.hpp"

#include <iostream>

int main(int argc, char** argv) { return a3::run_cli(argc, argv, std::cout, std::cerr); }
