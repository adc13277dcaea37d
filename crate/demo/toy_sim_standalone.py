#!/usr/bin/env python3
"""Toy multipath transfer model: throughput and latency of one bulk download."""
import random

BASE_THROUGHPUT = {"minrtt": 30.0, "blest": 20.0, "redundant": 10.0}
CC_BONUS = {"cubic": 0.0, "bbr": 2.0}


def simulate(scheduler, cc, loss, rng):
    throughput = BASE_THROUGHPUT[scheduler] + CC_BONUS[cc] - 3.0 * loss + rng.gauss(0.0, 1.0)
    latency = 50.0 - throughput / 2.0 + 5.0 * loss + abs(rng.gauss(0.0, 1.0))
    return round(throughput, 6), round(latency, 6)


def report(name, value):
    print(f"{name} = {value}")


scheduler = "minrtt"
cc = "cubic"
loss = 0.0
rng = random.Random(42)

throughput, latency = simulate(scheduler, cc, loss, rng)
report("throughput", throughput)
report("latency", latency)
