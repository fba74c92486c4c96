#!/usr/bin/env python3
"""Writes the bundled training/validation corpus under data/corpus.

The text is generated from a small English grammar with a fixed seed, so the
output is reproducible and free of licensing concerns. Three sources mimic
child-directed speech, simple stories and encyclopedic prose.
"""

import argparse
import pathlib
import random

NAMES = ["Anna", "Ben", "Clara", "David", "Emma", "Finn", "Grace", "Henry", "Ivy", "Jack",
         "Lily", "Max", "Nora", "Oscar", "Rosa", "Sam", "Tom", "Vera", "Will", "Zoe"]
ANIMALS = ["dog", "cat", "bird", "fish", "horse", "cow", "duck", "rabbit", "mouse", "bear",
           "fox", "owl", "frog", "sheep", "goat", "pig", "lion", "tiger", "whale", "bee"]
THINGS = ["ball", "book", "cup", "hat", "shoe", "box", "car", "boat", "kite", "drum",
          "apple", "cake", "spoon", "chair", "bed", "door", "window", "tree", "flower", "stone"]
PLACES = ["garden", "forest", "kitchen", "park", "river", "farm", "house", "school", "town", "beach",
          "hill", "field", "lake", "barn", "room", "shop", "road", "bridge", "village", "island"]
COLORS = ["red", "blue", "green", "yellow", "white", "black", "brown", "pink", "orange", "grey"]
SIZES = ["big", "small", "little", "tall", "short", "long", "tiny", "huge", "old", "young"]
FEELINGS = ["happy", "sad", "tired", "hungry", "cold", "warm", "sleepy", "busy", "quiet", "brave"]
VERBS_T = [("see", "sees", "saw"), ("find", "finds", "found"), ("like", "likes", "liked"),
           ("want", "wants", "wanted"), ("hold", "holds", "held"), ("take", "takes", "took"),
           ("carry", "carries", "carried"), ("watch", "watches", "watched"), ("build", "builds", "built"),
           ("paint", "paints", "painted"), ("throw", "throws", "threw"), ("bring", "brings", "brought")]
VERBS_I = [("run", "runs", "ran"), ("jump", "jumps", "jumped"), ("sing", "sings", "sang"),
           ("sleep", "sleeps", "slept"), ("swim", "swims", "swam"), ("laugh", "laughs", "laughed"),
           ("play", "plays", "played"), ("walk", "walks", "walked"), ("dance", "dances", "danced"),
           ("wait", "waits", "waited"), ("climb", "climbs", "climbed"), ("hide", "hides", "hid")]
TIMES = ["in the morning", "at night", "after lunch", "every day", "on Sunday", "in the summer",
         "in the winter", "before dinner", "at noon", "one day"]
TOPICS = [("river", "rivers", "water that flows toward the sea"),
          ("mountain", "mountains", "land that rises high above the ground"),
          ("forest", "forests", "a large area covered with trees"),
          ("island", "islands", "land with water on every side"),
          ("desert", "deserts", "a dry place with very little rain"),
          ("volcano", "volcanoes", "an opening where hot rock comes out of the earth"),
          ("glacier", "glaciers", "a slow river of ice"),
          ("planet", "planets", "a large body that moves around a star"),
          ("comet", "comets", "a ball of ice and dust that travels through space"),
          ("bridge", "bridges", "a structure that carries a road over water"),
          ("library", "libraries", "a building where people borrow books"),
          ("harbor", "harbors", "a safe place for ships near the coast")]
FACT_VERBS = ["are found in many parts of the world", "can be very old", "change slowly over time",
              "are studied by scientists", "appear on many maps", "have been described for centuries",
              "are important for people and animals", "vary greatly in size"]
REGIONS = ["Europe", "Asia", "Africa", "South America", "North America", "Australia", "the north",
           "the south", "the coast", "the interior"]
NUMBERS = ["two", "three", "four", "five", "six", "seven", "eight", "nine", "ten", "many"]


def cap(s):
    return s[0].upper() + s[1:]


class Grammar:
    def __init__(self, rng):
        self.r = rng

    def pick(self, xs):
        return self.r.choice(xs)

    def np(self, plural=False):
        r = self.r
        noun = self.pick(ANIMALS + THINGS)
        adj = self.pick(COLORS + SIZES) + " " if r.random() < 0.4 else ""
        if plural:
            det = self.pick(["the", "some", "two", "many", "those"])
            return f"{det} {adj}{noun}s"
        det = self.pick(["the", "a", "my", "your", "that", "this"])
        if det == "a" and (adj or noun)[0] in "aeiou":
            det = "an"
        return f"{det} {adj}{noun}"

    def subject(self):
        r = self.r.random()
        if r < 0.35:
            return self.pick(NAMES), False
        if r < 0.5:
            return self.pick(["we", "they"]), True
        plural = self.r.random() < 0.4
        return self.np(plural), plural

    def child(self):
        r = self.r.random()
        if r < 0.2:
            return f"{self.pick(['Look at', 'Where is', 'Do you see', 'Can you find'])} {self.np()}" + \
                   ("?" if self.r.random() < 0.7 else ".")
        if r < 0.35:
            return cap(f"{self.pick(['is', 'was'])} the {self.pick(ANIMALS)} {self.pick(FEELINGS)}?")
        if r < 0.5:
            return f"{self.pick(['Yes', 'No', 'Oh', 'Okay', 'Good job', 'Wow'])}" + \
                   self.pick([".", "!", ", look.", ", that is a " + self.pick(THINGS) + "."])
        if r < 0.65:
            return f"What does the {self.pick(ANIMALS)} say?"
        if r < 0.8:
            return cap(f"{self.np()} is {self.pick(COLORS + SIZES + FEELINGS)}.")
        v = self.pick(VERBS_T)
        return f"{self.pick(['Do you', 'Shall we', 'Let us'])} {v[0]} {self.np()}" + \
               ("?" if self.r.random() < 0.6 else ".")

    def story(self):
        subj, plural = self.subject()
        r = self.r.random()
        if r < 0.4:
            v = self.pick(VERBS_T)
            s = f"{subj} {v[2]} {self.np(self.r.random() < 0.3)} in the {self.pick(PLACES)}"
        elif r < 0.7:
            v = self.pick(VERBS_I)
            s = f"{subj} {v[2]} {self.pick(TIMES)}"
        elif r < 0.85:
            v = self.pick(VERBS_I)
            s = f"{subj} {v[0] if plural else v[1]} near the {self.pick(PLACES)}"
        else:
            s = f"{subj} {'were' if plural else 'was'} {self.pick(FEELINGS)} because the " \
                f"{self.pick(THINGS)} was {self.pick(COLORS + SIZES)}"
        if self.r.random() < 0.25:
            v = self.pick(VERBS_I)
            s += f", and then {self.pick(['they', 'everyone', 'the ' + self.pick(ANIMALS)])} {v[2]}"
        if self.r.random() < 0.08:
            return '"' + cap(s) + '?" asked ' + self.pick(NAMES) + "."
        return cap(s) + "."

    def wiki(self):
        sing, plur, gloss = self.pick(TOPICS)
        r = self.r.random()
        if r < 0.25:
            return f"A {sing} is {gloss}."
        if r < 0.5:
            return cap(f"{plur} {self.pick(FACT_VERBS)}.")
        if r < 0.7:
            return f"There are {self.pick(NUMBERS)} large {plur} in {self.pick(REGIONS)}."
        if r < 0.85:
            year = 1500 + self.r.randrange(500)
            return f"The first {sing} in {self.pick(REGIONS)} was recorded in {year}."
        if r < 0.93:
            return f"Why do {plur} {self.pick(['form', 'move', 'change', 'matter'])}?"
        return f"Most {plur} in {self.pick(REGIONS)} {self.pick(FACT_VERBS)}, " \
               f"while others {self.pick(FACT_VERBS)}."


def write_split(out, rng, budgets):
    out.mkdir(parents=True, exist_ok=True)
    for name, (kind, n_bytes) in budgets.items():
        g = Grammar(rng)
        make = getattr(g, kind)
        lines, size = [], 0
        while size < n_bytes:
            line = make()
            lines.append(line)
            size += len(line) + 1
        (out / f"{name}.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default=str(pathlib.Path(__file__).resolve().parent.parent / "data" / "corpus"))
    ap.add_argument("--seed", type=int, default=20240501)
    ap.add_argument("--train-bytes", type=int, default=900_000)
    ap.add_argument("--val-bytes", type=int, default=100_000)
    args = ap.parse_args()
    rng = random.Random(args.seed)
    shares = {"child": ("child", 0.4), "stories": ("story", 0.4), "wiki": ("wiki", 0.2)}
    out = pathlib.Path(args.out)
    for split, total in (("train", args.train_bytes), ("val", args.val_bytes)):
        write_split(out / split, rng, {k: (kind, int(total * w)) for k, (kind, w) in shares.items()})


if __name__ == "__main__":
    main()
