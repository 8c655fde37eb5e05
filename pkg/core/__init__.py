"""
Core package: solver errors and command workflows
"""
