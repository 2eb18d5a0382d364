"""
Pipeline stages: triplet preparation, generation, uncertainty filtering, dataset
assembly, evaluation and the image formation physics.
"""
