"""Generate the caption-style prompt corpus used for training and scanning."""
import argparse
import random

SUBJECTS = [
    "man", "woman", "dog", "cat", "child", "bird", "horse", "girl", "boy", "cow", "bear", "duck",
    "chef", "nurse", "dancer", "farmer", "pilot", "sheep", "fox", "baby", "couple", "surfer",
    "skier", "monk", "queen", "king", "robot", "goat", "owl", "wolf", "pig", "frog", "clown",
    "sailor", "player", "artist", "puppy", "kitten", "mouse", "tiger",
]
ADJECTIVES = [
    "", "red", "big", "small", "old", "happy", "wet", "tiny", "lazy", "brown", "white", "black",
    "young", "sad", "tall", "calm", "busy", "shy",
]
PLACES = [
    "on a bed", "in snow", "on a boat", "at a desk", "in a park", "on grass", "by a lake", "in rain",
    "on a bus", "at night", "in a cafe", "on a hill", "near a car", "with a hat", "with a kite",
    "in a field", "on a roof", "at a beach", "in a room", "on a bike", "with a ball", "in a shop",
    "by a tree", "on a road", "in a barn", "with a cup", "at dawn", "in fog", "on ice", "in a van",
    "on a sofa", "in a pool", "by a fire", "on a wall", "in a tent", "at a gate", "in a yard",
]
VOWELS = "aeiou"


def article(word):
    return "an" if word[0] in VOWELS else "a"


def make(rng):
    noun = rng.choice(SUBJECTS)
    adj = rng.choice(ADJECTIVES)
    if rng.random() < 0.12:
        head = f"two {adj} {noun}s" if adj else f"two {noun}s"
    else:
        head = f"{adj} {noun}" if adj else noun
        head = f"{article(head)} {head}"
    return f"{head} {rng.choice(PLACES)}"


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--count", type=int, default=6000)
    ap.add_argument("--max-bytes", type=int, default=22)
    ap.add_argument("--seed", type=int, default=7)
    ap.add_argument("--out", default="data/prompts.txt")
    args = ap.parse_args()

    rng = random.Random(args.seed)
    seen = set()
    out = []
    attempts = 0
    while len(out) < args.count:
        attempts += 1
        if attempts > 200 * args.count:
            raise SystemExit(f"only {len(out)} distinct prompts fit in {args.max_bytes} bytes")
        p = make(rng)
        if len(p.encode()) <= args.max_bytes and p not in seen:
            seen.add(p)
            out.append(p)
    with open(args.out, "w") as f:
        f.write(f"# {args.count} generated prompts, seed {args.seed}, at most {args.max_bytes} bytes\n")
        f.write("\n".join(out) + "\n")


if __name__ == "__main__":
    main()
