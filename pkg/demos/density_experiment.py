"""Train desk models at 300 and 1000 input points and compare held-out scores.

Shares the acceptance cache, so a model trained here is reused by the tests.
"""

import sys
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "tests"))
import _desk  # noqa: E402


def main() -> None:
    for n in (300, 1000):
        r = _desk.run(n)
        print(f"{n:5d} points: IoU {np.mean(r['iou_trained']):.3f} "
              f"(random init {np.mean(r['iou_random']):.3f}), "
              f"accuracy {r['val_accuracy']:.3f} (majority {r['majority']:.3f}), "
              f"train {r['train_seconds'] / 60:.1f} min")


if __name__ == "__main__":
    main()
