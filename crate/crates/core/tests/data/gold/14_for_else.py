def has_neg(xs):
    for x in xs:
        if x < 0:
            found = True
            break
    else:
        found = False
    return found
