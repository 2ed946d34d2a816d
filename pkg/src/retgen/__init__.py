"""Joint dense retrieval and grounded generation at desk scale.

Submodules are imported on demand so the command-line entry point can set
thread budgets before numpy loads.
"""

__version__ = "0.1.0"
