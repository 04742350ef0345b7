#!/usr/bin/env python3
"""
Command-line entry point for kclflow.

Runs the pipeline stages: importing case files, generating scenario
datasets, solving power flows, projecting flows onto the KCL-feasible set,
training and evaluating the surrogate, and the end-to-end ``repro`` run.
"""

import sys
from management import main

if __name__ == "__main__":
    sys.exit(main())
