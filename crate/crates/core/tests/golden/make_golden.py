#!/usr/bin/env python3
"""Independent reference renderer for the golden PPM files.

Re-implements the palette arithmetic from its definition (ramp intensity
round(255 * |v| / (clamp * sigma)), cyan/orange beyond the clamp, black for
zero or missing) without touching the Rust code.
"""
import math
import os

HERE = os.path.dirname(os.path.abspath(__file__))
CLAMP = 3.0


def round_half_away(x):
    # x >= 0 here
    f = math.floor(x)
    return int(f) + (1 if x - f >= 0.5 else 0)


def color(v, sigma):
    if v is None or v == 0.0:
        return (0, 0, 0)
    limit = CLAMP * sigma
    m = abs(v)
    if m > limit:
        return (255, 165, 0) if v > 0 else (0, 255, 255)
    c = round_half_away(255.0 * (m / limit))
    return (c, 0, 0) if v > 0 else (0, 0, c)


def ppm(w, h, pixels):
    head = b"P6\n%d %d\n255\n" % (w, h)
    return head + bytes(b for p in pixels for b in p)


def grid16():
    vals = []
    for j in range(16):
        for i in range(16):
            if (i * 3 + j * 5) % 11 == 0:
                vals.append(None)
            else:
                vals.append(((i * 7 + j * 13) % 17 - 8) * 0.25)
    vals[3 * 16 + 5] = 12.0
    vals[12 * 16 + 10] = -12.0
    return vals


def population_sigma(vals):
    xs = [v for v in vals if v is not None]
    s = 0.0
    for x in xs:
        s += x
    mean = s / len(xs)
    ss = 0.0
    for x in xs:
        ss += (x - mean) * (x - mean)
    return math.sqrt(ss / len(xs))


def main():
    cases = {"color_zero.ppm": 0.0, "color_plus4sigma.ppm": 4.0, "color_minus1p5sigma.ppm": -1.5}
    for name, v in cases.items():
        with open(os.path.join(HERE, name), "wb") as f:
            f.write(ppm(1, 1, [color(v, 1.0)]))
    vals = grid16()
    sigma = population_sigma(vals)
    with open(os.path.join(HERE, "map16.ppm"), "wb") as f:
        f.write(ppm(16, 16, [color(v, sigma) for v in vals]))


if __name__ == "__main__":
    main()
