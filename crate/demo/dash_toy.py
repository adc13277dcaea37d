#!/usr/bin/env python3
"""Toy stand-in for one DASH playback session.

Emits quality, stallings and net_util from a closed-form model of the
player under a noisy bandwidth trace. Deterministic given MACI_SEED.
"""
import json
import os
import random
import urllib.request

PLAYER_EFFICIENCY = {"DASH.JS": 0.92, "Shaka": 0.88, "AStream": 0.80}
LADDER_MBPS = [0.3, 0.75, 1.2, 1.85, 2.85, 4.3, 5.8]


def param(name):
    raw = os.environ["MACI_PARAM_" + name]
    try:
        return float(raw)
    except ValueError:
        return raw


def report(metric, value):
    body = json.dumps({"metric": metric, "value": value}).encode()
    req = urllib.request.Request(
        os.environ["MACI_REPORT_URL"] + "/metric",
        data=body,
        headers={"Content-Type": "application/json"},
    )
    urllib.request.urlopen(req)


def main():
    rng = random.Random(int(os.environ["MACI_SEED"]))
    player = param("player")
    bola = param("adapt_algo") == "BOLA"
    segment = param("segment_length_s")
    target = param("target_buffer_s")
    target = 12.0 if target == "Default" else target
    mean, var = param("bw_mean_mbps"), param("bw_var_mbps2")

    buffer_s, stallings, qualities, used = target / 2, 0, [], 0.0
    for _ in range(int(120 / segment)):
        bw = max(0.05, rng.gauss(mean, var ** 0.5))
        budget = bw * PLAYER_EFFICIENCY[player] * (0.9 if bola else 1.0)
        level = max([i for i, r in enumerate(LADDER_MBPS) if r <= budget] or [0])
        if buffer_s < segment and bola:
            level = max(0, level - 1)
        download_s = LADDER_MBPS[level] * segment / bw
        buffer_s -= download_s
        if buffer_s < 0:
            stallings += 1
            buffer_s = 0.0
        buffer_s = min(buffer_s + segment, target + segment)
        qualities.append(level)
        used += min(1.0, LADDER_MBPS[level] / bw)

    report("quality", sum(qualities) / len(qualities))
    report("stallings", stallings)
    report("net_util", 100 * used / len(qualities))


if __name__ == "__main__":
    main()
