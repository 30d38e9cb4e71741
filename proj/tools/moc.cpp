#include <iostream>

#include "moc/cli.hpp"

int main(int argc, char** argv) { return moc::run_cli(argc, argv, std::cout, std::cerr); }
