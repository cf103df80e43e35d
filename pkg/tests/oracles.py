"""Independent reference computations used by several test modules."""

import itertools
import math
import random

import numpy as np

from vanetsec.mixzone import MixEvent, MixZone, Port, TraverseDistribution


def brute_force_posterior(enters, exits, transition, traverse_probs, bin_ms, port_names):
    """Posterior over bijections from the raw priors, as a dict perm -> prob.

    ``traverse_probs`` maps (i, j) to a list of bin masses, bin b covering
    durations in (b*bin_ms, (b+1)*bin_ms].
    """
    idx = {name: i for i, name in enumerate(port_names)}
    weights = {}
    for perm in itertools.permutations(range(len(enters))):
        w = 1.0
        for a, j in zip(enters, perm):
            b = exits[j]
            pi, po = idx[a.port], idx[b.port]
            dur = b.time_ms - a.time_ms
            probs = traverse_probs.get((pi, po))
            if dur <= 0 or probs is None:
                w = 0.0
                break
            k = math.ceil(dur / bin_ms) - 1
            w *= transition[pi][po] * (probs[k] if k < len(probs) else 0.0)
        weights[perm] = w
    z = sum(weights.values())
    return {p: w / z for p, w in weights.items() if w > 0}


def entropy_bits(probs):
    return -sum(p * math.log2(p) for p in probs if p > 0)


def random_instance(rng: random.Random, n: int):
    """A zone with random priors and n crossings drawn from it, plus the
    same priors in raw form for the oracle."""
    n_ports = rng.randint(2, 4)
    names = [f"q{i}" for i in range(n_ports)]
    transition = []
    for _ in range(n_ports):
        row = [rng.random() + 0.01 for _ in range(n_ports)]
        transition.append([x / sum(row) for x in row])
    bins, bin_ms = rng.randint(3, 8), 100
    raw = {}
    for i in range(n_ports):
        for j in range(n_ports):
            if rng.random() < 0.85 or i == j:
                w = [rng.random() for _ in range(bins)]
                raw[(i, j)] = [x / sum(w) for x in w]
    traverse = {k: TraverseDistribution(tuple(v), bin_ms) for k, v in raw.items()}
    ports = [Port(name, float(i), 0.0) for i, name in enumerate(names)]
    zone = MixZone.symmetric("r", n_ports)
    zone = MixZone("r", zone.geometry, ports, np.array(transition), traverse)
    pairs = sorted(raw)
    enters, exits = [], []
    for v in range(n):
        i, j = rng.choice(pairs)
        t = rng.uniform(0, 300)
        enters.append(MixEvent("enter", bytes([1, v]), names[i], t))
        exits.append(MixEvent("exit", bytes([2, v]), names[j], t + rng.uniform(1, bins * bin_ms - 1)))
    enters.sort(key=lambda e: e.time_ms)
    exits.sort(key=lambda e: e.time_ms)
    return zone, enters, exits, transition, raw, bin_ms, names
