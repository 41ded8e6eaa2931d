import os

# Determinism contract assumes single-threaded math; pin BLAS pools before
# numpy spins them up.
for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(var, "1")


def pytest_terminal_summary(terminalreporter):
    """Echo the one-line acceptance verdicts after the test run."""
    try:
        import test_acceptance
    except ImportError:
        return
    if test_acceptance.LINES:
        terminalreporter.section("acceptance criteria")
        for line in test_acceptance.LINES:
            terminalreporter.write_line(line)
