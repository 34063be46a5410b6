"""
Material-prompted hyperspectral tracking library
"""
