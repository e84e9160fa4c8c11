"""Crowd-navigation learning pipeline.

Camera rectification, detection-to-pose tracking, robot-centric occupancy
maps, a from-scratch CNN action regressor, a 2D hallway crowd simulator,
and a WebSocket tele-operation bridge.
"""

__version__ = "0.1.0"
