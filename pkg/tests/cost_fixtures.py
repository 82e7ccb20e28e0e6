"""Hand-evaluated wall-time fixtures: (function name, kwargs, expected value)."""

from fractions import Fraction as F

MB = 2**20

# Reference throughputs in batches/s of the different model scales.
NU_VALUES = (2, 0.147, 0.839, 0.144, 0.395, 0.032, 0.12)

FIXTURES = [
    ("local_time", {"tau": 512, "nu": 2}, 256.0),
    ("local_time", {"tau": 0, "nu": 2}, 0.0),
    ("local_time", {"tau": 64, "nu": 2}, 32.0),
    ("local_time", {"tau": 500, "nu": 0.032}, 15625.0),
    ("local_time", {"tau": 500, "nu": 0.147}, float(F(500) / F("0.147"))),
    ("local_time", {"tau": 500, "nu": 0.839}, float(F(500) / F("0.839"))),
    ("local_time", {"tau": 500, "nu": 0.144}, float(F(500) / F("0.144"))),
    ("local_time", {"tau": 500, "nu": 0.395}, float(F(500) / F("0.395"))),
    ("local_time", {"tau": 500, "nu": 0.12}, float(F(500) / F("0.12"))),
    ("local_time", {"tau": 128, "nu": 0.147}, float(F(128) / F("0.147"))),
    ("comm_time", {"topology": "rar", "k": 4, "s_mb": 1000, "bandwidth": 125}, 12.0),
    ("comm_time", {"topology": "ps", "k": 8, "s_mb": 500, "bandwidth": 125}, 32.0),
    ("comm_time", {"topology": "ar", "k": 8, "s_mb": 500, "bandwidth": 125}, 28.0),
    ("comm_time", {"topology": "rar", "k": 8, "s_mb": 500, "bandwidth": 125}, 7.0),
    ("comm_time", {"topology": "ps", "k": 16, "s_mb": 250, "bandwidth": 1250}, 3.2),
    ("comm_time", {"topology": "ar", "k": 2, "s_mb": 100, "bandwidth": 50}, 2.0),
    ("comm_time", {"topology": "rar", "k": 2, "s_mb": 100, "bandwidth": 50}, 2.0),
    ("comm_time", {"topology": "rar", "k": 16, "s_mb": 476.837158203125, "bandwidth": 125},
     float(F(2) * F(476.837158203125) * 15 / (16 * 125))),
    ("comm_time", {"topology": "ps", "k": 1, "s_mb": 1000, "bandwidth": 125}, 0.0),
    ("comm_time", {"topology": "ar", "k": 1, "s_mb": 1000, "bandwidth": 125}, 0.0),
    ("comm_time", {"topology": "rar", "k": 1, "s_mb": 1000, "bandwidth": 125}, 0.0),
    ("agg_time", {"k": 4, "s_mb": 1000, "zeta": 5e12}, float(F(4 * 1000 * 4 * MB) / F(5 * 10**12))),
    ("agg_time", {"k": 0, "s_mb": 1000, "zeta": 5e12}, 0.0),
    ("agg_time", {"k": 4, "s_mb": 1000, "zeta": 1e13}, float(F(4 * 1000 * 4 * MB) / F(10**13))),
    ("megabytes_per_round", {"topology": "ps", "k": 4, "s_mb": 100}, 800.0),
    ("megabytes_per_round", {"topology": "ar", "k": 4, "s_mb": 100}, 600.0),
    ("megabytes_per_round", {"topology": "rar", "k": 4, "s_mb": 100}, 150.0),
]

# T_total for R=10 rounds of tau=512 at nu=2 with RAR K=4, S=1000, B=125
TOTAL_FIXTURE = {"rounds": 10, "t_local": 256.0, "t_comm": 12.0, "t_total": 2680.0,
                 "comm_percent": float(F(120, 2680) * 100)}
