# numerics, plant, MPC, GP model, tightening loop and experiment runner
