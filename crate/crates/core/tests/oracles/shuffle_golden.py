"""Reference implementation of the pinned training-subset shuffle.

Entries are sorted by image_id, shuffled with Fisher-Yates driven by
splitmix64 (j = high 64 bits of next() * (i + 1)), and the first k kept.
Used once to produce the golden vectors frozen in the Rust tests.
"""
import sys

MASK = (1 << 64) - 1


class SplitMix64:
    def __init__(self, seed):
        self.state = seed & MASK

    def next(self):
        self.state = (self.state + 0x9E3779B97F4A7C15) & MASK
        z = self.state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK
        return z ^ (z >> 31)


def sample(ids, k, seed):
    items = sorted(ids)
    rng = SplitMix64(seed)
    for i in range(len(items) - 1, 0, -1):
        j = (rng.next() * (i + 1)) >> 64
        items[i], items[j] = items[j], items[i]
    return items[:k]


if __name__ == "__main__":
    rng = SplitMix64(0)
    print("splitmix64(0) first three:", [hex(rng.next()) for _ in range(3)])
    print("5 ids, k=3, seed=42:", sample(["img-e", "img-c", "img-a", "img-d", "img-b"], 3, 42))
    print("20 ids, k=20, seed=7:", sample([f"t{i:02d}" for i in range(20)], 20, 7))
