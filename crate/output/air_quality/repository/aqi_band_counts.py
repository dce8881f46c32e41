import csv, json, sys
from collections import Counter

counts = Counter()
with open(sys.argv[1], newline="") as f:
    for row in csv.DictReader(f):
        try:
            counts[int(row["aqi"])] += 1
        except (KeyError, TypeError, ValueError):
            continue
print(json.dumps({"aqi_band_counts": {str(k): counts[k] for k in sorted(counts)}}))
