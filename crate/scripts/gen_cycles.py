"""Regenerate the bundled drive cycles in crates/core/data.

nedc_like.csv: ECE-15 urban segment, EUDC extra-urban segment, ECE-15 again,
then 10 s idle (800 samples). Knots follow the published NEDC phase table;
gear-change plateaus are kept.

nycc_like.csv: synthetic low-speed stop-and-go trace (600 samples) built from
micro-trips to match the NYCC summary statistics (peak 44.6 km/h, mean speed
about 11.4 km/h). It is not the official second-by-second NYCC record.
"""
import numpy as np
import os

ECE = [(0, 0), (11, 0), (15, 15), (23, 15), (28, 0), (49, 0), (54, 15), (56, 15),
       (61, 32), (85, 32), (96, 0), (117, 0), (122, 15), (124, 15), (133, 35),
       (135, 35), (143, 50), (155, 50), (163, 35), (176, 35), (188, 0), (195, 0)]
EUDC = [(0, 0), (20, 0), (25, 15), (27, 15), (36, 35), (38, 35), (46, 50), (48, 50),
        (61, 70), (111, 70), (119, 50), (188, 50), (201, 70), (251, 70), (286, 100),
        (316, 100), (336, 120), (346, 120), (380, 0), (400, 0)]


def segment(knots, length):
    t = np.arange(length)
    kt, kv = zip(*knots)
    return np.interp(t, kt, kv)


def nedc_like():
    kmh = np.concatenate([segment(ECE, 195), segment(EUDC, 400), segment(ECE, 195), np.zeros(10)])
    return kmh / 3.6


def nycc_like():
    # (idle s, peak km/h, accel s, cruise s, decel s)
    trips = [(6, 18, 6, 6, 6), (14, 27, 9, 12, 8), (22, 12, 5, 5, 5), (9, 36, 12, 18, 11),
             (30, 44.6, 16, 10, 15), (12, 20, 7, 8, 7), (26, 30, 10, 16, 9), (8, 14, 5, 4, 5),
             (34, 38, 13, 8, 12), (15, 24, 8, 12, 8), (20, 10, 4, 2, 4), (11, 32, 11, 9, 10),
             (28, 19, 7, 5, 7)]
    kmh = []
    for idle, peak, acc, cruise, dec in trips:
        kmh += [0.0] * idle
        kmh += list(np.linspace(0, peak, acc + 1)[1:])
        kmh += [peak] * cruise
        kmh += list(np.linspace(peak, 0, dec + 1)[1:])
    kmh = np.array(kmh)
    assert len(kmh) <= 600, len(kmh)
    kmh = np.concatenate([kmh, np.zeros(600 - len(kmh))])
    return kmh / 3.6


def write(path, name, v):
    with open(path, "w") as f:
        f.write(f"# {name}\n# time_s,speed_mps\n")
        for i, s in enumerate(v):
            f.write(f"{i},{s:.4f}\n")
    print(name, len(v), "max km/h", v.max() * 3.6, "mean km/h", v.mean() * 3.6,
          "dist km", v.sum() / 1000)


here = os.path.join(os.path.dirname(__file__), "..", "crates", "core", "data")
write(os.path.join(here, "nedc_like.csv"), "NEDC-like (ECE + EUDC + ECE, 800 s)", nedc_like())
write(os.path.join(here, "nycc_like.csv"), "NYCC-like (synthetic stop-and-go, 600 s)", nycc_like())
