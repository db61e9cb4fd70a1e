"""Weakly supervised epithelium segmentation from restained IHC/H&E slide pairs.

Step 1 turns IHC images into epithelium masks by colour deconvolution and a
first segmentation network; the masks are carried to the H&E image by
multimodal (NGF + curvature) registration and used to train the H&E network.
"""

__version__ = "0.1.0"
