"""Console entry point; applies the BBE_THREADS cap before numpy loads."""
import os
import sys


def main():
    threads = os.environ.get("BBE_THREADS")
    if threads:
        for var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS",
                    "NUMEXPR_NUM_THREADS"):
            os.environ.setdefault(var, threads)
    from .harness import main as run
    return run()


if __name__ == "__main__":
    sys.exit(main())
