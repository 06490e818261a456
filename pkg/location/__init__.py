"""
Location service on top of the overlay: UID to TL records, successor pointers and redirects.
"""
