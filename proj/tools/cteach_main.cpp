#include <iostream>

#include "cteach/cli.hpp"

int main(int argc, char** argv) { return cteach::run_cli(argc, argv, std::cout, std::cerr); }
