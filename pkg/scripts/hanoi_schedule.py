"""Trail contents under the FIFO + Towers-of-Hanoi discard rule.

Prints the discard index per frame for the first frames, the stored frame
strides at the end, and the largest pose age seen over a long run.
"""
import argparse

import numpy as np

from ekfvio.filter import hanoi_discard_index


def simulate(n_fifo, n_a, frames):
    slots = [None] * n_a
    max_age, strides = 0, set()
    for i in range(frames):
        d = hanoi_discard_index(i, n_fifo, n_a)
        del slots[d - 1]
        slots.insert(0, i)
        if None not in slots:
            max_age = max(max_age, i - slots[-1])
            strides |= set((-np.diff(slots)).tolist())
    return slots, max_age, strides


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--frames", type=int, default=4096)
    ap.add_argument("--show", type=int, default=16)
    args = ap.parse_args()
    for n_fifo, n_a in [(2, 6), (17, 20)]:
        print(f"n_fifo={n_fifo} n_a={n_a}")
        print("  discard index, frames 0..%d: %s" % (
            args.show - 1, [hanoi_discard_index(i, n_fifo, n_a) for i in range(args.show)]))
        slots, max_age, strides = simulate(n_fifo, n_a, args.frames)
        print(f"  final trail {slots}")
        print(f"  max age {max_age} (pure FIFO: {n_a - 1}), strides seen {sorted(strides)}")


if __name__ == "__main__":
    main()
