"""Time the numba and numpy backends of nfnpcdr.kernels.

The backend is fixed at import time, so each one runs in its own
interpreter (NFNPCDR_NUMBA=1 / 0). Each child also hashes its outputs; the
two hashes must agree because the backends are bit-compatible.

    python3 benchmarks/bench_kernels.py [--repeat 5]
"""

import argparse
import json
import os
import subprocess
import sys
import time

CHILD = r"""
import hashlib, json, sys, time
import numpy as np
from nfnpcdr import kernels, synthdata
from nfnpcdr.data import preprocess
from nfnpcdr.model import ModelConfig
from nfnpcdr.training import TrainConfig, fit

repeat = int(sys.argv[1])
rng = np.random.default_rng(0)
values = rng.standard_normal((20000, 64))
seg = np.sort(rng.integers(0, 1000, 20000))
h = hashlib.sha256()

def best(fn):
    fn()  # warm-up (JIT compile / cache load)
    times = []
    for _ in range(repeat):
        t = time.perf_counter()
        out = fn()
        times.append(time.perf_counter() - t)
    return min(times), out

res = {"backend": kernels.BACKEND}
res["segment_sorted_sum"], out = best(lambda: kernels.segment_sorted_sum(values, seg, 1000))
h.update(out.tobytes())
res["leading_sum"], out = best(lambda: kernels.leading_sum(values))
h.update(out.tobytes())
cfg = synthdata.SynthConfig(seed=1)
res["synth_generate"], data = best(lambda: synthdata.generate(cfg))
h.update(repr([(x.user_id, x.item_id, x.rating) for x in data.source + data.target]).encode())
pre = preprocess(data.source, data.target, 0.2, 1)
t = time.perf_counter()
model, _ = fit(pre, ModelConfig(rating_scale=0.2), TrainConfig(epochs=2, batch_size=32, lam=0.01))
res["train_2_epochs"] = time.perf_counter() - t
for name, arr in model.state_dict().items():
    h.update(arr.tobytes())
res["digest"] = h.hexdigest()
print(json.dumps(res))
"""


def run(flag, repeat):
    env = dict(os.environ, NFNPCDR_NUMBA=flag)
    out = subprocess.run([sys.executable, "-c", CHILD, str(repeat)], env=env, check=True,
                         capture_output=True, text=True).stdout
    return json.loads(out.strip().splitlines()[-1])


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    t0 = time.perf_counter()
    nb = run("1", args.repeat)
    np_ = run("0", args.repeat)
    print(f"{'kernel':<22}{'numba (s)':>12}{'numpy (s)':>12}{'speedup':>10}")
    for key in ("segment_sorted_sum", "leading_sum", "synth_generate", "train_2_epochs"):
        print(f"{key:<22}{nb[key]:>12.4f}{np_[key]:>12.4f}{np_[key] / nb[key]:>9.1f}x")
    same = nb["digest"] == np_["digest"]
    print(f"backends: {nb['backend']} vs {np_['backend']}; outputs identical: {same}")
    print(f"total wall time {time.perf_counter() - t0:.1f}s")
    if not same:
        print("backend outputs differ", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
