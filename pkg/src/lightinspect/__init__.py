"""lightinspect: compact anti-aliased attention-condenser networks and an
end-to-end visual quality inspection toolkit for light guide plates."""

__version__ = "0.1.0"
