import csv, json, sys

values = []
with open(sys.argv[1], newline="") as f:
    for row in csv.DictReader(f):
        try:
            values.append(float(row["pm2_5"]))
        except (KeyError, TypeError, ValueError):
            continue
mean = sum(values) / len(values) if values else None
print(json.dumps({"pm2_5_mean": mean, "rows_used": len(values)}))
