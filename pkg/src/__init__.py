"""
Fair Translate - fairness-aware attribute translation toolkit
"""
