"""Shared label/calibration fixtures and a mutation fuzzer for the parsers."""

from mono3d.kittiio import ParseError, parse_calib, parse_labels

FIXTURE = (
    "Car 0.00 0 -1.58 587.01 173.33 614.12 200.12 1.65 1.67 3.64 -0.65 1.71 46.70 -1.59\n"
    "Pedestrian 0.00 2 0.21 423.17 173.67 433.17 224.03 1.87 0.54 0.86 -8.50 1.86 34.62 -0.03\n"
    "DontCare -1.00 -1 -10.00 503.89 169.71 590.61 190.13 -1.00 -1.00 -1.00 -1000.00 -1000.00 -1000.00 -10.00\n"
    "Cyclist 0.12 1 1.57 100.00 150.50 180.25 260.75 1.72 0.61 1.76 -12.10 1.60 18.30 0.99 0.8765\n"
)

CALIB = (
    "P0: 7.215377e+02 0.000000e+00 6.095593e+02 0.000000e+00 0.000000e+00 7.215377e+02 1.728540e+02 "
    "0.000000e+00 0.000000e+00 0.000000e+00 1.000000e+00 0.000000e+00\n"
    "P2: 7.215377e+02 0.000000e+00 6.095593e+02 4.485728e+01 0.000000e+00 7.215377e+02 1.728540e+02 "
    "2.163791e-01 0.000000e+00 0.000000e+00 1.000000e+00 2.745884e-03\n"
)


def mutate(rng, text):
    chars = list(text)
    for _ in range(rng.integers(1, 6)):
        op = rng.integers(0, 4)
        pos = int(rng.integers(0, len(chars) + 1))
        if op == 0 and chars:
            del chars[min(pos, len(chars) - 1)]
        elif op == 1:
            chars.insert(pos, chr(int(rng.choice([rng.integers(32, 127), rng.integers(0, 0x3000)]))))
        elif op == 2 and chars:
            chars[min(pos, len(chars) - 1)] = rng.choice(list(" .-+e0123456789\tx\n"))
        else:
            chars.insert(pos, rng.choice(["nan", "inf", "1e400", "--", "P2:", "DontCare", ""]))
    return "".join(chars)


def fuzz(rng, count):
    """Mutated label and calibration texts; returns (parsed, rejected) counts."""
    parsed = rejected = 0
    for i in range(count):
        if i % 2:
            try:
                parse_labels(mutate(rng, FIXTURE))
                parsed += 1
            except ParseError as err:
                assert err.line >= 1 and err.column >= 1
                rejected += 1
        else:
            try:
                parse_calib(mutate(rng, CALIB))
                parsed += 1
            except ParseError as err:
                assert err.line >= 1 and err.column >= 1
                rejected += 1
    return parsed, rejected
