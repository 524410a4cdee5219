# Boxes, masks and overlap measures
