"""
mSCTP transport with dynamic address reconfiguration for handover.
"""
