//! Regular sample grids on the unit parameter cube.

/// Cell centres of the uniform `g^dim` grid on `[0, 1]^dim`, row-major with
/// the last axis fastest.
pub fn cell_centres(dim: usize, g: usize) -> Vec<Vec<f64>> {
    let total = g.pow(dim as u32);
    (0..total)
        .map(|mut idx| {
            let mut p = vec![0.0; dim];
            for axis in (0..dim).rev() {
                p[axis] = ((idx % g) as f64 + 0.5) / g as f64;
                idx /= g;
            }
            p
        })
        .collect()
}

/// Nodes of the uniform grid with `g + 1` points per axis, boundaries included.
pub fn nodes(dim: usize, g: usize) -> Vec<Vec<f64>> {
    let per = g + 1;
    let total = per.pow(dim as u32);
    (0..total)
        .map(|mut idx| {
            let mut p = vec![0.0; dim];
            for axis in (0..dim).rev() {
                p[axis] = (idx % per) as f64 / g as f64;
                idx /= per;
            }
            p
        })
        .collect()
}

/// Linear index of the neighbour one step forward along `axis` in a
/// `g^dim` row-major grid, if it exists.
pub fn forward_neighbour(index: usize, axis: usize, dim: usize, g: usize) -> Option<usize> {
    let stride = g.pow((dim - 1 - axis) as u32);
    let coord = (index / stride) % g;
    (coord + 1 < g).then_some(index + stride)
}
