import sys
from pathlib import Path

# Tests import sibling helper modules (mc_oracles etc.) directly.
sys.path.insert(0, str(Path(__file__).parent))
