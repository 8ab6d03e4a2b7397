#!/usr/bin/env python3
"""Count StrengthNet parameters by walking layer shapes by hand.

Deliberately independent of torch and of strengthnet.model: it re-derives every
tensor shape from the architecture description so the result can serve as an
oracle for the model's own parameter count.

    python scripts/param_count.py            # default config
    python scripts/param_count.py --filters 2 4 8 16 --mel 8 --cells 3 --fc 4
"""
import argparse
import math


def shapes(mel=80, filters=(16, 32, 64, 128), layers_per_block=3, freq_strides=(1, 1, 3),
           kernel=(3, 3), cells=128, fc=128, emotions=4):
    out = []
    in_ch, freq = 1, mel
    for b, f in enumerate(filters):
        for layer in range(layers_per_block):
            out.append((f"conv{b}.{layer}.weight", (f, in_ch, *kernel)))
            out.append((f"conv{b}.{layer}.bias", (f,)))
            in_ch = f
            freq = math.ceil(freq / freq_strides[layer])
    enc = in_ch * freq
    for branch in ("strength", "emotion"):
        for direction in ("fwd", "bwd"):
            # four gates stacked; input and recurrent biases kept separately
            out.append((f"{branch}_lstm.{direction}.w_ih", (4 * cells, enc)))
            out.append((f"{branch}_lstm.{direction}.w_hh", (4 * cells, cells)))
            out.append((f"{branch}_lstm.{direction}.b_ih", (4 * cells,)))
            out.append((f"{branch}_lstm.{direction}.b_hh", (4 * cells,)))
    out += [("fc1.weight", (fc, 2 * cells)), ("fc1.bias", (fc,)),
            ("fc2.weight", (1, fc)), ("fc2.bias", (1,)),
            ("emotion_out.weight", (emotions, 2 * cells)), ("emotion_out.bias", (emotions,))]
    return out, freq


def count(**kwargs) -> int:
    return sum(math.prod(s) for _, s in shapes(**kwargs)[0])


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--mel", type=int, default=80)
    ap.add_argument("--filters", type=int, nargs="+", default=[16, 32, 64, 128])
    ap.add_argument("--cells", type=int, default=128)
    ap.add_argument("--fc", type=int, default=128)
    ap.add_argument("-v", "--verbose", action="store_true")
    args = ap.parse_args()
    kw = dict(mel=args.mel, filters=tuple(args.filters), cells=args.cells, fc=args.fc)
    table, freq = shapes(**kw)
    if args.verbose:
        for name, s in table:
            print(f"{name:32s} {str(s):20s} {math.prod(s)}")
        print(f"frequency bins after encoder: {freq}")
    print(count(**kw))


if __name__ == "__main__":
    main()
