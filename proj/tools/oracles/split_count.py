# Seeded hash partition of ids doc-0..doc-999 (seed 42, fraction 0.7).
M = (1 << 64) - 1

def fnv1a(s):
    h = 0xCBF29CE484222325
    for b in s.encode():
        h ^= b
        h = (h * 0x100000001B3) & M
    return h

def splitmix64(x):
    x = (x + 0x9E3779B97F4A7C15) & M
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & M
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & M
    return x ^ (x >> 31)

def position(doc_id, seed):
    return (splitmix64(fnv1a(doc_id) ^ splitmix64(seed)) >> 11) * 2.0**-53

train = sum(position(f"doc-{i}", 42) < 0.7 for i in range(1000))
print("train", train)
print("doc-0", repr(position("doc-0", 42)))
