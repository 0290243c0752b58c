"""Writes fixtures/train150.jsonl and prints the expected k=100, seed=7 subset."""
import hashlib
import json
import os

from shuffle_golden import sample

HERE = os.path.dirname(os.path.abspath(__file__))
WORDS = ["harbor", "granite", "rocket", "tapestry", "bridge", "glacier", "lighthouse", "cathedral",
         "locomotive", "orchard", "volcano", "market", "temple", "canal", "windmill"]

rows = []
for i in range(150):
    # File order deliberately differs from id order.
    n = (i * 37) % 150
    w = WORDS[n % len(WORDS)]
    rows.append({
        "image_id": f"tr-{n:03d}",
        "article_id": f"art-{n // 3}",
        "description": f"Photo number {n} of a {w}.",
        "context": f"This paragraph discusses the {w} shown in image {n}.",
        "caption": f"The {w} seen from the north, view {n}",
        "split": "train",
    })
with open(os.path.join(HERE, "..", "fixtures", "train150.jsonl"), "w") as f:
    for r in rows:
        f.write(json.dumps(r) + "\n")

chosen = sample([r["image_id"] for r in rows], 100, 7)
print("first five:", chosen[:5])
print("last:", chosen[-1])
print("sha256 of newline-joined ids:", hashlib.sha256("\n".join(chosen).encode()).hexdigest())
