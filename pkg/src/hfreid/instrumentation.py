"""Call counters for the training-only subsystems.

The evaluation path must never touch wavelet decomposition, patch mining, or
the prototype bank; tests assert these counters stay flat across it.
"""
from __future__ import annotations

counters = {"wavelet": 0, "mining": 0, "protobank": 0}


def bump(name):
    counters[name] += 1


def snapshot():
    return dict(counters)


def reset():
    for k in counters:
        counters[k] = 0
