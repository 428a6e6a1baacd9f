#include "ranwatch/runner.hpp"

int main(int argc, char** argv) { return ranwatch::runner::run_cli(argc, argv); }
