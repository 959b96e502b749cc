"""Group-CAM Kit - grouped score-weighted saliency maps and their evaluation"""

__version__ = "0.1.0"
