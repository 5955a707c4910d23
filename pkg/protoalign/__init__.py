"""
Few-shot 3D segmentation with local prototypes and atlas alignment.
"""
