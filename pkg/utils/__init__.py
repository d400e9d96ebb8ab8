"""
Dataset files and checkpoint persistence
"""
