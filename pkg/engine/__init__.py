"""
FCTSBN engine: conditional weights, generative and recognition models, trainers and the fctsbn command
"""
