#!/usr/bin/env python3
"""Toy multipath transfer model: throughput and latency of one bulk download."""
import random
import json, os, urllib.request

BASE_THROUGHPUT = {"minrtt": 30.0, "blest": 20.0, "redundant": 10.0}
CC_BONUS = {"cubic": 0.0, "bbr": 2.0}


def simulate(scheduler, cc, loss, rng):
    throughput = BASE_THROUGHPUT[scheduler] + CC_BONUS[cc] - 3.0 * loss + rng.gauss(0.0, 1.0)
    latency = 50.0 - throughput / 2.0 + 5.0 * loss + abs(rng.gauss(0.0, 1.0))
    return round(throughput, 6), round(latency, 6)


def report(name, value):
    print(f"{name} = {value}")
    urllib.request.urlopen(urllib.request.Request(os.environ["MACI_REPORT_URL"] + "/metric", data=json.dumps({"metric": name, "value": value}).encode(), headers={"Content-Type": "application/json"}))


scheduler = "minrtt"
cc = "cubic"
loss = 0.0
rng = random.Random(42)
scheduler = os.environ["MACI_PARAM_scheduler"]
cc = os.environ["MACI_PARAM_cc"]
loss = float(os.environ["MACI_PARAM_loss"])
rng = random.Random(int(os.environ["MACI_SEED"]))

throughput, latency = simulate(scheduler, cc, loss, rng)
report("throughput", throughput)
report("latency", latency)
