#!/usr/bin/env python3
"""Independent evaluation of the oracle's closed-form step mapping.

Recomputes three reference values from the default constants without using
the Rust code, so the unit tests have an outside check.
"""
import math

K0, CK = 1.5, 3.0
LAMBDA0, C_PRESSURE, C_NEUTRAL = 0.15, 0.5, 0.35
A0, BETA = 2.0, 0.8
GAIN = {"E1": 0.90, "E2": 0.95, "E3": 1.0, "E4": 1.05}


def step(duration_s, power_w, pressure_mtorr, flow_etch_sccm, equipment, depth_center_um, edge=False):
    tau, power = duration_s / 60.0, power_w / 1500.0
    pressure, flow = pressure_mtorr / 80.0, flow_etch_sccm / 500.0
    ion, neutral = tau * power * GAIN[equipment], tau * flow
    lam = (LAMBDA0 + C_PRESSURE * pressure + C_NEUTRAL * neutral) * (1.05 if edge else 1.0)
    k = K0 + CK * power
    amp = A0 * ion / (1.0 + BETA * depth_center_um)
    return k, lam, amp


def increment(k, lam, amp, x):
    return amp * math.exp(-((x / lam) ** k))


if __name__ == "__main__":
    k, lam, amp = step(60, 1500, 80, 500, "E3", 0.0)
    print(f"max-knob step: k={k} lambda={lam} A={amp}")
    assert abs(k - 4.5) < 1e-12 and abs(lam - 1.0) < 1e-12 and abs(amp - 2.0) < 1e-12

    _, _, amp_deep = step(60, 1500, 80, 500, "E3", 2.5)
    print(f"amplitude at 2.5 um centre depth: {amp_deep!r}")
    assert abs(amp_deep - 2.0 / 3.0) < 1e-12

    d1 = increment(*step(60, 1500, 80, 500, "E3", 0.0), 0.0)
    d2 = d1 + increment(*step(60, 1500, 80, 500, "E3", d1), 0.0)
    print(f"two-step centre depth: {d2!r}")
    assert abs(d2 - 2.769230769230769) < 1e-12

    print(f"increment at x = lambda, k = 1, A = 2: {increment(1.0, 1.0, 2.0, 1.0)!r}")
    print("ok")
