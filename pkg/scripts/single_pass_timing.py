"""Forward wall-clock and grouped-conv call counts of the student as the task count grows.

    python3 scripts/single_pass_timing.py --batch 32 --tasks 1 2 4 8
"""

import argparse
import statistics
import time

import numpy as np

from eksdecomp.conv import call_counts
from eksdecomp.eks import TaskMask
from eksdecomp.model import ArchConfig, DecompModel, forward_student
from eksdecomp.tensor import Tensor


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--batch", type=int, default=32)
    ap.add_argument("--tasks", type=int, nargs="+", default=[1, 2, 4, 8])
    ap.add_argument("--rank", type=int, default=8)
    ap.add_argument("--repeats", type=int, default=25)
    args = ap.parse_args()

    rng = np.random.default_rng(0)
    x = Tensor(rng.normal(size=(args.batch, 1, 16, 16)))
    runs = {}
    for t in args.tasks:
        model = DecompModel.init(ArchConfig(task_classes=(4,) * t), args.rank, seed=0)
        runs[t] = (model, TaskMask.from_tasks(rng.permutation(np.arange(args.batch) % t), t))
    times = {t: [] for t in args.tasks}
    for rep in range(args.repeats + 1):
        for t, (model, mask) in runs.items():
            call_counts.clear()
            start = time.perf_counter()
            forward_student(model, x, mask)
            if rep:
                times[t].append(time.perf_counter() - start)
    base = statistics.median(times[args.tasks[0]])
    print("T  grouped_conv_calls  median_ms  ratio")
    for t, (model, mask) in runs.items():
        call_counts.clear()
        forward_student(model, x, mask)
        med = statistics.median(times[t])
        print(f"{t:<2d} {call_counts['grouped_conv2d']:>18d} {1e3 * med:10.2f} {med / base:6.2f}")


if __name__ == "__main__":
    main()
