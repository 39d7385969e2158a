"""Regenerate ``reflood_golden.json``: clad traces from an adaptive 8th-order
integration of the lumped reflood heat balance, independent of the package's
fixed-step integrator.

    python tests/data/make_reflood_golden.py
"""

import json
from pathlib import Path

import numpy as np
from scipy.integrate import solve_ivp

T_SAT, Q, C = 373.15, 1.5e4, 5000.0
H_FILM, H_QUENCH, WIDTH = 30.0, 5000.0, 0.05
ELEVATIONS = (0.8, 1.6)
TIMES = np.linspace(0.0, 120.0, 241)

CASES = [
    {"x": [900.0, 0.02], "theta": [1.0, 1.0]},
    {"x": [1000.0, 0.03], "theta": [1.4, 0.8]},
    {"x": [800.0, 0.015], "theta": [0.6, 1.3]},
]


def rhs(t, T, x, theta, z):
    wet = 0.5 * (1.0 + np.tanh((theta[1] * x[1] * t - z) / (2.0 * WIDTH)))
    h = theta[0] * H_FILM * (1.0 - wet) + H_QUENCH * wet
    return (Q - h * (T - T_SAT)) / C


def trace(x, theta):
    out = []
    for z in ELEVATIONS:
        sol = solve_ivp(rhs, (TIMES[0], TIMES[-1]), [x[0]], method="DOP853", t_eval=TIMES,
                        rtol=1e-12, atol=1e-10, args=(x, theta, z))
        out.append(sol.y[0].tolist())
    return out


def main():
    cases = [dict(c, traces=trace(c["x"], c["theta"])) for c in CASES]
    payload = {"times": TIMES.tolist(), "elevations": list(ELEVATIONS), "cases": cases}
    path = Path(__file__).with_name("reflood_golden.json")
    path.write_text(json.dumps(payload, indent=1) + "\n")
    print(f"wrote {path}")


if __name__ == "__main__":
    main()
