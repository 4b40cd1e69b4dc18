"""Brute-force recount of the preprocessing statistics for a `::` ratings file.

Usage: python3 recount.py ml1m_excerpt.dat > ml1m_excerpt.expected.json
"""
import json
import sys
from collections import Counter, defaultdict

MIN_COUNT = 5


def main(path):
    raw = []
    with open(path) as f:
        for line in f:
            if line.strip():
                user, item, _rating, ts = line.strip().split("::")
                raw.append((user, item, int(ts)))
    unique, seen = [], set()
    for row in raw:
        if row not in seen:
            seen.add(row)
            unique.append(row)
    item_counts = Counter(item for _, item, _ in unique)
    by_item = [r for r in unique if item_counts[r[1]] >= MIN_COUNT]
    user_counts = Counter(user for user, _, _ in by_item)
    kept = [r for r in by_item if user_counts[r[0]] >= MIN_COUNT]
    per_user = defaultdict(list)
    for user, item, _ in kept:
        per_user[user].append(item)
    users = {u: items for u, items in per_user.items() if len(items) >= 3}
    interactions = sum(len(v) for v in users.values())
    items = {i for v in users.values() for i in v}
    out = {
        "raw_interactions": len(unique),
        "duplicates_removed": len(raw) - len(unique),
        "filtered_interactions": len(kept),
        "dropped_short_users": len(per_user) - len(users),
        "users": len(users),
        "items": len(items),
        "interactions": interactions,
        "mean_length": interactions / len(users),
    }
    json.dump(out, sys.stdout, indent=2)
    print()


if __name__ == "__main__":
    main(sys.argv[1])
