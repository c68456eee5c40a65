"""Generate the synthetic English-like text fixture used by the tests.

Usage: python3 scripts/make_fixture_corpus.py [--seed 7] [--bytes 1000000] > fixtures/corpus.txt
"""

import argparse
import random
import sys

NAMES = ["Ada", "Bram", "Cora", "Dmitri", "Elin", "Farid", "Greta", "Hugo", "Ines", "Jonah",
         "Kaia", "Luca", "Mira", "Nils", "Odile", "Pavel", "Quinn", "Rosa", "Soren", "Tamsin"]
PLACES = ["the harbor", "the old mill", "the library", "the market", "the northern ridge",
          "the river bank", "the station", "the orchard", "the workshop", "the lighthouse",
          "the valley", "the square", "the bakery", "the school", "the forest road"]
NOUNS = ["lantern", "letter", "boat", "garden", "bridge", "clock", "map", "kettle", "window",
         "ledger", "horse", "song", "storm", "engine", "basket", "candle", "fence", "coat",
         "wheel", "book", "stone", "field", "door", "rope", "bell", "cart", "mirror", "well"]
ADJS = ["old", "quiet", "broken", "bright", "heavy", "small", "distant", "wooden", "cold",
        "careful", "strange", "narrow", "green", "patient", "tired", "warm", "hollow", "steady"]
VERBS_T = [("found", "find"), ("carried", "carry"), ("repaired", "repair"), ("painted", "paint"),
           ("opened", "open"), ("sold", "sell"), ("watched", "watch"), ("cleaned", "clean"),
           ("borrowed", "borrow"), ("measured", "measure"), ("hid", "hide"), ("built", "build")]
VERBS_I = ["waited", "laughed", "slept", "worked", "listened", "wandered", "sang", "rested",
           "argued", "returned", "hesitated", "smiled"]
ADVS = ["slowly", "quietly", "again", "at last", "without a word", "before dawn", "all morning",
        "in the rain", "for a while", "with great care"]
TIMES = ["In the morning", "That evening", "Later", "On the third day", "Before the winter",
         "After the storm", "Every spring", "One afternoon", "At noon", "By midnight"]
CONNECT = ["because", "although", "while", "until", "so that", "after", "before"]
NUMBERS = ["two", "three", "four", "five", "seven", "ten", "twelve", "twenty"]


def np(r):
    roll = r.random()
    if roll < 0.35:
        return "the " + r.choice(NOUNS)
    if roll < 0.65:
        return "the " + r.choice(ADJS) + " " + r.choice(NOUNS)
    if roll < 0.8:
        return "a " + r.choice(ADJS) + " " + r.choice(NOUNS)
    if roll < 0.9:
        return r.choice(NUMBERS) + " " + r.choice(NOUNS) + "s"
    return r.choice(NAMES) + "'s " + r.choice(NOUNS)


def clause(r, subject=None):
    s = subject or r.choice(NAMES)
    roll = r.random()
    if roll < 0.45:
        c = f"{s} {r.choice(VERBS_T)[0]} {np(r)}"
    elif roll < 0.7:
        c = f"{s} {r.choice(VERBS_I)}"
    elif roll < 0.85:
        c = f"{s} went to {r.choice(PLACES)}"
    else:
        c = f"{np(r)} was {r.choice(ADJS)}"
    if r.random() < 0.4:
        c += " " + r.choice(ADVS)
    if r.random() < 0.3:
        c += " near " + r.choice(PLACES)
    return c


def sentence(r, subject):
    roll = r.random()
    if roll < 0.2:
        text = f"{r.choice(TIMES)}, {clause(r, subject)}."
    elif roll < 0.4:
        text = f"{clause(r, subject)} {r.choice(CONNECT)} {clause(r)}."
    elif roll < 0.5:
        verb = r.choice(VERBS_T)[1]
        text = f'"Will you {verb} {np(r)}?" asked {subject}.'
    elif roll < 0.6:
        text = f'"I {r.choice(VERBS_T)[0]} {np(r)}," said {subject}.'
    else:
        text = clause(r, subject) + "."
    return text[0].upper() + text[1:]


def paragraph(r):
    subject = r.choice(NAMES)
    n = r.randint(3, 8)
    return " ".join(sentence(r, subject if r.random() < 0.6 else r.choice(NAMES)) for _ in range(n))


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--seed", type=int, default=7)
    ap.add_argument("--bytes", type=int, default=1_000_000)
    args = ap.parse_args()
    r = random.Random(args.seed)
    out = []
    size = 0
    while size < args.bytes:
        p = paragraph(r) + "\n\n"
        out.append(p)
        size += len(p.encode())
    sys.stdout.write("".join(out)[: args.bytes])


if __name__ == "__main__":
    main()
