"""Exception types shared across the toolchain.

Every error carries the process exit code the CLI maps it to, so failure
semantics stay identical between library use and the command line:

    2  validation / input errors (the catch-all base class)
    3  fingerprint mismatch between compiled model and target
    4  resource budget exceeded on the target device
    5  compiled graph does not form a single accelerator subgraph
"""


class DpuflowError(Exception):
    """Base class for all toolchain errors. CLI exit code 2."""

    exit_code = 2


class GraphValidationError(DpuflowError):
    """Graph document failed validation.

    Collects every diagnostic found in one pass instead of stopping at the
    first, so a bad model file is fixable in one edit.
    """

    def __init__(self, diagnostics):
        self.diagnostics = list(diagnostics)
        super().__init__(
            "invalid graph (%d problem%s): %s"
            % (
                len(self.diagnostics),
                "" if len(self.diagnostics) == 1 else "s",
                "; ".join(self.diagnostics),
            )
        )


class ContainerError(DpuflowError):
    """Malformed tensor container: bad version, bad checksum, truncated blob."""


class CalibrationError(DpuflowError):
    """Calibration could not produce usable quantization parameters."""


class AccumulatorOverflow(DpuflowError):
    """An INT8 layer overflowed its 32-bit accumulator (hard error, no wrap)."""


class FingerprintMismatch(DpuflowError):
    """Compiled model was built for a different target. CLI exit code 3."""

    exit_code = 3

    def __init__(self, expected, actual):
        self.expected = expected
        self.actual = actual
        super().__init__(
            "target fingerprint mismatch: compiled for %016x, target is %016x"
            % (expected, actual)
        )


class ResourceBudgetError(DpuflowError):
    """Target configuration does not fit the device. CLI exit code 4."""

    exit_code = 4

    def __init__(self, report):
        self.report = report
        over = ", ".join(
            "%s %d > %d" % (name, row.used, row.total) for name, row in report.exceeded()
        )
        super().__init__("resource budget exceeded: " + over)


class SubgraphGateError(DpuflowError):
    """Partitioning produced != 1 accelerator subgraph. CLI exit code 5."""

    exit_code = 5

    def __init__(self, subgraph_count, offenders):
        self.subgraph_count = subgraph_count
        self.offenders = list(offenders)
        msg = "model does not map to a single accelerator subgraph (got %d)" % subgraph_count
        if self.offenders:
            msg += "; unsupported layers: " + ", ".join(
                "%s(%s)" % (lid, kind) for lid, kind in self.offenders
            )
        super().__init__(msg)
