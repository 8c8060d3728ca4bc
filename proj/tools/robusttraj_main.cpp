#include "robusttraj/experiment.hpp"

int main(int argc, char** argv) { return robusttraj::experiment::cli_main(argc, argv); }
