import sys
from pathlib import Path

# Make the oracle helpers importable without packaging the tests dir.
sys.path.insert(0, str(Path(__file__).parent))
