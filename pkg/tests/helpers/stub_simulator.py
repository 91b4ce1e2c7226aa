"""Line-protocol stub: replies -||theta||^2.

Options: --malformed-every K (every Kth reply is garbage),
--hang-at N (the Nth request of this process never gets a reply),
--die-at N (exit before answering the Nth request).
"""

import argparse
import json
import sys
import time

ap = argparse.ArgumentParser()
ap.add_argument("--malformed-every", type=int, default=0)
ap.add_argument("--hang-at", type=int, default=0)
ap.add_argument("--die-at", type=int, default=0)
ap.add_argument("--counter-file", default=None)
args = ap.parse_args()

# counts across restarts, so a hang or death happens only once per run
seen = 0
if args.counter_file:
    try:
        with open(args.counter_file) as fh:
            seen = int(fh.read() or 0)
    except FileNotFoundError:
        pass

for line in sys.stdin:
    seen += 1
    if args.counter_file:
        with open(args.counter_file, "w") as fh:
            fh.write(str(seen))
    theta = json.loads(line)["theta"]
    if args.die_at and seen == args.die_at:
        sys.exit(3)
    if args.hang_at and seen == args.hang_at:
        time.sleep(3600)
    if args.malformed_every and seen % args.malformed_every == 0:
        sys.stdout.write("not json at all\n")
    else:
        sys.stdout.write(json.dumps({"loglik": -sum(t * t for t in theta)}) + "\n")
    sys.stdout.flush()
