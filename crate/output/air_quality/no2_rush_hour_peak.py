import csv, json, sys
from datetime import datetime

peak = None
with open(sys.argv[1], newline="") as f:
    for row in csv.DictReader(f):
        try:
            ts = datetime.strptime(row["timestamp"], "%Y-%m-%d %H:%M:%S")
            value = float(row["no2"])
        except (KeyError, TypeError, ValueError):
            continue
        if 7 <= ts.hour < 10 or 17 <= ts.hour < 20:
            if peak is None or value > peak:
                peak = value
print(json.dumps({"no2_rush_hour_peak": peak}))
