"""Cross-domain adaptation for 2D-to-3D human pose lifting.

Global position alignment places source 3D poses in the target camera so
their projections match target 2D scale and root position; adversarial
local pose augmentation diversifies bone angles, lengths and orientation.
"""
__version__ = "0.1.0"
