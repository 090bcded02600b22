#!/usr/bin/env python3
"""Run the phenotyper pipeline from a source checkout (same as `phenotyper run ...`)."""
import sys

from cli.main import main

if __name__ == "__main__":
    sys.exit(main(sys.argv[1:] or ["run", "--config", "data/pipeline.toml"]))
