#include "voltgrid/circuit.hpp"
#include "voltgrid/powerflow.hpp"
#include "voltgrid/feeder_gen.hpp"
#include "voltgrid/graph.hpp"
#include "voltgrid/tensor.hpp"
#include "voltgrid/env.hpp"
#include "voltgrid/policy.hpp"
#include "voltgrid/ppo.hpp"
#include "voltgrid/experiments.hpp"
int main() { return 0; }
