#include "cli.hpp"

int main(int argc, char** argv) { return dsa::dispatch(std::vector<std::string>(argv, argv + argc)); }
