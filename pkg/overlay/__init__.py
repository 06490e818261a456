"""
Chord overlay: identifiers, ring nodes, key storage and iterative lookups.
"""
