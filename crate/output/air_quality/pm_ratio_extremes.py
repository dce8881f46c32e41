import csv, json, sys

ratios = []
with open(sys.argv[1], newline="") as f:
    for row in csv.DictReader(f):
        try:
            pm25 = float(row["pm2_5"])
            pm10 = float(row["pm10"])
        except (KeyError, TypeError, ValueError):
            continue
        if pm10 > 0:
            ratios.append(pm25 / pm10)
if ratios:
    result = {"ratio_min": min(ratios), "ratio_max": max(ratios)}
else:
    result = {"ratio_min": None, "ratio_max": None}
print(json.dumps(result))
