import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))

import pytest

from voiannotate.geometry import parse_scene

DESK_SCENE = """
# coffee-machine style desk scene, cameras on the -y side:
# machine body on a table, wall behind (+y), four VOI features on the front
material display 0.10 0.15 0.75
material button 0.85 0.15 0.12
material spout  0.92 0.80 0.15
material lid    0.12 0.72 0.25
material default 0.45 0.45 0.50
material env 0.60 0.55 0.45 checker 0.22 0.38 0.34 0.30

voi display box 0.00 -0.052 1.22 0.080 0.006 0.050
voi button cyl 0.08 -0.05 1.10 0 -1 0 0.030 0.022
voi spout box 0.00 -0.09 1.00 0.040 0.042 0.045
voi lid cyl -0.06 0.05 1.30 0 0 1 0.050 0.030

bg default box 0.00 0.05 1.10 0.15 0.10 0.20
bg env box 0.00 0.00 0.45 0.40 0.30 0.45
bg env box 0.00 0.75 0.90 0.80 0.05 0.90

light -0.35 -0.80 0.70 1.0
ambient 0.25
"""


@pytest.fixture(scope="session")
def desk_scene():
    return parse_scene(DESK_SCENE)
