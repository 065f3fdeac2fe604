import os
import sys

# Prefer the in-tree build when ctest points us at it.
build = os.environ.get("REQSENTRY_PYTHONPATH")
if build:
    sys.path.insert(0, build)
