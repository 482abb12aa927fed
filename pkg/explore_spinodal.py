"""Scratch: march the spinodal preset in segments, watch settling."""
import sys
import time

import numpy as np

from bschsim import build_run, load_preset, run
from bschsim.stationary import StationaryError, StationaryProblem, newton_solve

SEGMENT = 30.0
N_SEGMENTS = int(sys.argv[1]) if len(sys.argv) > 1 else 6

cfg = load_preset("spinodal")
ctx = build_run(cfg, seed=0)
disc, ops = ctx.disc, ctx.ops
problem = StationaryProblem(ops, disc.params, disc.bulk_potential,
                            disc.surface_potential)

state = ctx.initial
t = 0.0
rows = []
for seg in range(N_SEGMENTS):
    t_next = t + SEGMENT
    tic = time.perf_counter()
    rec = run(disc, state, t, t_next, velocity=ctx.velocity)
    wall = time.perf_counter() - tic
    state = rec.final_state
    rows.append((rec.times, rec.energy, rec.dissipation,
                 rec.separation_margin))
    de_tail = rec.energy[-1] - rec.energy[-65]  # last time unit
    print(f"t={t_next:6.1f} wall={wall:5.1f}s E={rec.energy[-1]:+.9f} "
          f"dE(last 1tu)={de_tail:+.3e} margin={rec.separation_margin[-1]:.4f} "
          f"min_margin={np.min(rec.separation_margin):.4f} "
          f"diss={rec.dissipation[-1]:.3e} "
          f"newton_max={int(np.max(rec.newton_iterations))}", flush=True)
    try:
        tic = time.perf_counter()
        sol = newton_solve(problem, state.phase, tol=1e-10)
        print(f"   refine: iters={sol.iterations} residual={sol.residual_norm:.3e} "
              f"separation={sol.separation:.4f} "
              f"E*={disc.energy(sol.phase):+.9f} "
              f"({time.perf_counter() - tic:.1f}s)", flush=True)
    except StationaryError as err:
        print(f"   refine: FAILED {err} ({time.perf_counter() - tic:.1f}s)",
              flush=True)
    t = t_next

times = np.concatenate([r[0] if not i else r[0][1:]
                        for i, r in enumerate(rows)])
energy = np.concatenate([r[1] if not i else r[1][1:]
                         for i, r in enumerate(rows)])
diss = np.concatenate([r[2] if not i else r[2][1:]
                       for i, r in enumerate(rows)])
margin = np.concatenate([r[3] if not i else r[3][1:]
                         for i, r in enumerate(rows)])
np.savez("/tmp/spinodal_march.npz", times=times, energy=energy,
         dissipation=diss, margin=margin)
print("saved /tmp/spinodal_march.npz")
