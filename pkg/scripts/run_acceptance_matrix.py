"""Launch the full acceptance experiment matrix (15 runs, 2 workers)."""
import sys
sys.path.insert(0, "src")  # allow running from a source checkout
from cord.config import ExperimentConfig
from cord.runner import run_matrix

if __name__ == "__main__":
    cells = run_matrix(ExperimentConfig(target_period=40), "runs/acceptance", workers=2)
    print("all runs complete:", len(cells))
