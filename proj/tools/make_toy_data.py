#!/usr/bin/env python3
# Copyright 2026 The dschat Authors
# SPDX-License-Identifier: Apache-2.0
"""Writes the small preference corpus and pretraining text under data/."""

import argparse
import json
import random
from pathlib import Path

COLORS = ["red", "blue", "green", "black", "white", "gray"]
ANIMALS = ["cat", "dog", "fox", "owl", "cow", "bee"]
CAPITALS = {"France": "Paris", "Japan": "Tokyo", "Italy": "Rome", "Peru": "Lima",
            "Kenya": "Nairobi", "Chile": "Santiago", "Spain": "Madrid"}


def arithmetic(rng):
    a, b = rng.randint(1, 20), rng.randint(1, 20)
    wrong = a + b + rng.choice([-2, -1, 1, 3])
    return f"What is {a} plus {b}?", f"It is {a + b}.", f"It is {wrong}."


def capital(rng):
    country = rng.choice(sorted(CAPITALS))
    other = rng.choice([c for c in CAPITALS.values() if c != CAPITALS[country]])
    return (f"Capital of {country}?", f"The capital is {CAPITALS[country]}.",
            f"The capital is {other}.")


def reverse(rng):
    word = rng.choice(ANIMALS + COLORS)
    return f"Spell {word} backwards.", f"Sure: {word[::-1]}.", "No."


def describe(rng):
    color, animal = rng.choice(COLORS), rng.choice(ANIMALS)
    return (f"Describe a {color} {animal}.", f"A {color} {animal} is calm and kind.",
            "I do not care.")


def greet(rng):
    name = rng.choice(["Ana", "Bo", "Cy", "Dee", "Eli", "Fay"])
    return f"Say hi to {name}.", f"Hello {name}, nice to meet you!", "Go away."


TASKS = [arithmetic, capital, reverse, describe, greet]


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default=str(Path(__file__).resolve().parent.parent / "data"))
    ap.add_argument("--pairs", type=int, default=300)
    ap.add_argument("--docs", type=int, default=120)
    ap.add_argument("--seed", type=int, default=7)
    args = ap.parse_args()

    rng = random.Random(args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "toy_pairs.jsonl", "w") as f:
        for i in range(args.pairs):
            prompt, chosen, rejected = TASKS[i % len(TASKS)](rng)
            f.write(json.dumps({"prompt": prompt, "chosen": chosen, "rejected": rejected}) + "\n")
    with open(out / "pretrain.txt", "w") as f:
        for _ in range(args.docs):
            color, animal = rng.choice(COLORS), rng.choice(ANIMALS)
            f.write(f"The {color} {animal} sat by the {rng.choice(COLORS)} door.\n")


if __name__ == "__main__":
    main()
