"""Power flow and the OPF oracle on the 14-bus network.

Run with ``python demos/power_flow_and_oracle.py``.
"""
import numpy as np

from gridppo.ac_pf import check_violations, solve_pf
from gridppo.grid_model import build_ybus, case14, modified_case14
from gridppo.opf_oracle import gen_cost, solve_opf

np.set_printoptions(precision=4, suppress=True)

case = case14()
print(f"{case.n_bus} buses, {len(case.branches)} branches, {case.n_gen} generators")

# admittance matrix is sparse in structure but stored dense here
Y = build_ybus(case)
print("nonzeros in Ybus:", np.count_nonzero(Y), "of", Y.size)

# power flow at the stored generator setpoints
pf = solve_pf(case)
print("converged in", pf.iterations, "iterations")
print("|V| =", np.abs(pf.V))
print("generator output (MW):", pf.Pg_out)
print("cost at stored setpoints ($/h):", round(gen_cost(case, pf.Pg_out), 2))

# the oracle finds the cheapest feasible setpoints
opf = solve_opf(case)
print("optimal cost ($/h):", round(opf.objective, 4), "status:", opf.status.value)
print("optimal Pg (MW):", opf.Pg_opt)
print("optimal Vg (p.u.):", opf.Vg_opt)

# tightening line 4-5 to 32 MVA makes the stored dispatch infeasible
mod = modified_case14()
rep = check_violations(mod, solve_pf(mod))
print("violations with line 4-5 at 32 MVA:", rep.categories())
opf_mod = solve_opf(mod)
print("optimal cost on the tightened network ($/h):", round(opf_mod.objective, 4))
replay = solve_pf(mod.with_operating_point(Pg=opf_mod.Pg_opt, Vg=opf_mod.Vg_opt))
print("replaying the optimum is clean:", check_violations(mod, replay).empty)
