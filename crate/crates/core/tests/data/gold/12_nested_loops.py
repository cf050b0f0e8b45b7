def pairs(n):
    res = []
    for i in range(n):
        for j in range(i):
            if i == j + 1:
                break
            res.append((i, j))
    return res
