"""Independent reference computations used by the tests.

These walk trees recursively with plain Python floats and share no
code with the package's vectorised routines.
"""
from __future__ import annotations

import math


def recursive_paths(tree) -> dict:
    """``{response: probability}`` by depth-first recursion over prefixes."""
    k, d = tree.shape
    out = {}

    def walk(prefix, mass):
        if len(prefix) == d:
            out[prefix] = out.get(prefix, 0.0) + mass
            return
        row = tree.conditional(prefix)
        out[prefix + ("EOS",)] = mass * float(row[k])
        for a in range(k):
            walk(prefix + (a,), mass * float(row[a]))

    walk((), 1.0)
    return out


def strip(response):
    return tuple(t for t in response if t != "EOS")


def cross_entropy(P, Q) -> float:
    p, q = recursive_paths(P), recursive_paths(Q)
    return -sum(pz * math.log(q[z]) for z, pz in p.items() if pz > 0)


def kl(P, Q) -> float:
    p, q = recursive_paths(P), recursive_paths(Q)
    return sum(pz * math.log(pz / q[z]) for z, pz in p.items() if pz > 0)


def response_log_prob(model, response) -> float:
    """``log Q(z)`` symbol by symbol; EOS is appended when the response ends early."""
    k, d = model.shape
    total = 0.0
    for i, a in enumerate(response):
        total += math.log(float(model.conditional(tuple(response[:i]))[a]))
    if len(response) < d:
        total += math.log(float(model.conditional(tuple(response))[k]))
    return total
