//! Free-form deformation registration: a cubic B-spline control grid per
//! pyramid level, optimized by gradient ascent on the multi-channel metric
//! with Gaussian-regularized updates and a backtracking step, so the
//! objective never decreases across accepted steps.

use rayon::prelude::*;

use crate::error::Result;
use crate::field::DeformationField;
use crate::filter::gaussian_smooth;
use crate::geometry::AffineTransform;
use crate::volume::{Geometry, Volume};

use super::metric;
use super::{ChannelKind, ChannelSet, LevelData, Metric, RegistrationConfig};

/// Cubic B-spline basis for the fractional cell coordinate.
#[inline]
fn bspline_weights(u: f64) -> [f64; 4] {
    let u2 = u * u;
    let u3 = u2 * u;
    [
        (1.0 - u).powi(3) / 6.0,
        (3.0 * u3 - 6.0 * u2 + 4.0) / 6.0,
        (-3.0 * u3 + 3.0 * u2 + 3.0 * u + 1.0) / 6.0,
        u3 / 6.0,
    ]
}

/// Per-axis lookup: cell index and basis weights for every voxel coordinate.
struct AxisTable {
    cell: Vec<usize>,
    weights: Vec<[f64; 4]>,
}

impl AxisTable {
    fn build(dim: usize, spacing: f64, delta: f64) -> Self {
        let mut cell = Vec::with_capacity(dim);
        let mut weights = Vec::with_capacity(dim);
        for x in 0..dim {
            let t = x as f64 * spacing / delta;
            let c = t.floor();
            cell.push(c as usize);
            weights.push(bspline_weights(t - c));
        }
        Self { cell, weights }
    }

    /// Contiguous voxel range influenced by control index `a` (cells a-3..=a).
    fn support(&self, a: usize) -> (usize, usize) {
        let lo_cell = a.saturating_sub(3);
        let lo = self.cell.partition_point(|&c| c < lo_cell);
        let hi = self.cell.partition_point(|&c| c <= a);
        (lo, hi)
    }
}

/// Control lattice: control `k` along an axis sits at position `(k-1)*delta`.
struct ControlGrid {
    n: [usize; 3],
    coef: Vec<[f64; 3]>,
}

impl ControlGrid {
    fn new(geom: &Geometry, delta: f64) -> Self {
        let mut n = [0usize; 3];
        for a in 0..3 {
            let extent = (geom.dims[a] - 1) as f64 * geom.spacing[a];
            n[a] = (extent / delta).floor() as usize + 4;
        }
        Self {
            n,
            coef: vec![[0.0; 3]; n[0] * n[1] * n[2]],
        }
    }

    #[inline]
    fn idx(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.n[0] * (j + self.n[1] * k)
    }

    /// Dense displacement over the voxel grid.
    fn eval_dense(&self, geom: &Geometry, tables: &[AxisTable; 3]) -> Vec<[f64; 3]> {
        let [nx, ny, _] = geom.dims;
        let mut out = vec![[0.0f64; 3]; geom.len()];
        out.par_chunks_mut(nx).enumerate().for_each(|(row, chunk)| {
            let y = row % ny;
            let z = row / ny;
            let (cy, wy) = (tables[1].cell[y], tables[1].weights[y]);
            let (cz, wz) = (tables[2].cell[z], tables[2].weights[z]);
            for (x, o) in chunk.iter_mut().enumerate() {
                let (cx, wx) = (tables[0].cell[x], tables[0].weights[x]);
                let mut acc = [0.0f64; 3];
                for dz in 0..4 {
                    let wz_ = wz[dz];
                    for dy in 0..4 {
                        let wyz = wy[dy] * wz_;
                        let base = self.idx(cx, cy + dy, cz + dz);
                        for dx in 0..4 {
                            let w = wx[dx] * wyz;
                            let c = self.coef[base + dx];
                            acc[0] += w * c[0];
                            acc[1] += w * c[1];
                            acc[2] += w * c[2];
                        }
                    }
                }
                *o = acc;
            }
        });
        out
    }

    /// Gather the per-voxel force into control-point space
    /// (transpose of `eval_dense`).
    fn project(&self, force: &[[f64; 3]], geom: &Geometry, tables: &[AxisTable; 3]) -> Vec<[f64; 3]> {
        let [nx, ny, _] = geom.dims;
        let n = self.n;
        (0..self.coef.len())
            .into_par_iter()
            .map(|cidx| {
                let a = cidx % n[0];
                let b = (cidx / n[0]) % n[1];
                let c = cidx / (n[0] * n[1]);
                let (x0, x1) = tables[0].support(a);
                let (y0, y1) = tables[1].support(b);
                let (z0, z1) = tables[2].support(c);
                let mut acc = [0.0f64; 3];
                for z in z0..z1 {
                    let wz = tables[2].weights[z][c - tables[2].cell[z]];
                    for y in y0..y1 {
                        let wyz = tables[1].weights[y][b - tables[1].cell[y]] * wz;
                        let rowbase = nx * (y + ny * z);
                        for x in x0..x1 {
                            let w = tables[0].weights[x][a - tables[0].cell[x]] * wyz;
                            let f = force[rowbase + x];
                            acc[0] += w * f[0];
                            acc[1] += w * f[1];
                            acc[2] += w * f[2];
                        }
                    }
                }
                acc
            })
            .collect()
    }
}

/// World-frame spatial gradient of a volume (central differences).
fn world_gradient(volume: &Volume) -> [Volume; 3] {
    let g = volume.geometry().clone();
    let [nx, ny, nz] = g.dims;
    let data = volume.data();
    let mut out = [vec![0.0f32; g.len()], vec![0.0f32; g.len()], vec![0.0f32; g.len()]];
    let dir = g.direction;
    let compute: Vec<[f32; 3]> = (0..g.len())
        .into_par_iter()
        .map(|idx| {
            let x = idx % nx;
            let y = (idx / nx) % ny;
            let z = idx / (nx * ny);
            let mut didx = [0.0f64; 3];
            let pos = [x, y, z];
            let dims = [nx, ny, nz];
            for k in 0..3 {
                let mut lo = pos;
                let mut hi = pos;
                if pos[k] > 0 {
                    lo[k] -= 1;
                }
                if pos[k] + 1 < dims[k] {
                    hi[k] += 1;
                }
                let h = (hi[k] - lo[k]) as f64;
                if h == 0.0 {
                    continue;
                }
                let vlo = data[lo[0] + nx * (lo[1] + ny * lo[2])] as f64;
                let vhi = data[hi[0] + nx * (hi[1] + ny * hi[2])] as f64;
                didx[k] = (vhi - vlo) / (h * g.spacing[k]);
            }
            // index-frame to world-frame
            let mut dworld = [0.0f32; 3];
            for j in 0..3 {
                let mut v = 0.0;
                for k in 0..3 {
                    v += didx[k] * dir[j][k];
                }
                dworld[j] = v as f32;
            }
            dworld
        })
        .collect();
    for (i, v) in compute.iter().enumerate() {
        out[0][i] = v[0];
        out[1][i] = v[1];
        out[2][i] = v[2];
    }
    [
        Volume::new(g.clone(), std::mem::take(&mut out[0])).expect("valid"),
        Volume::new(g.clone(), std::mem::take(&mut out[1])).expect("valid"),
        Volume::new(g, std::mem::take(&mut out[2])).expect("valid"),
    ]
}

/// Pull each moving channel through `init(p + u(p))`.
fn warp_channels(
    level: &LevelData,
    geom: &Geometry,
    u: &[[f64; 3]],
    init: &AffineTransform,
) -> Vec<Volume> {
    let [nx, ny, _] = geom.dims;
    level
        .moving
        .channels()
        .iter()
        .map(|ch| {
            let mut data = vec![0.0f32; geom.len()];
            data.par_chunks_mut(nx).enumerate().for_each(|(row, chunk)| {
                let y = row % ny;
                let z = row / ny;
                for (x, o) in chunk.iter_mut().enumerate() {
                    let idx = x + nx * (y + ny * z);
                    let p = geom.voxel_to_world([x as f64, y as f64, z as f64]);
                    let q = [p[0] + u[idx][0], p[1] + u[idx][1], p[2] + u[idx][2]];
                    *o = ch
                        .volume
                        .sample(init.apply(q), crate::volume::Interp::Linear);
                }
            });
            Volume::new(geom.clone(), data).expect("valid")
        })
        .collect()
}

fn objective_of(level: &LevelData, config: &RegistrationConfig, warped: &[Volume]) -> Result<f64> {
    let mut total = 0.0;
    for (i, (f, m)) in level
        .fixed
        .channels()
        .iter()
        .zip(level.moving.channels())
        .enumerate()
    {
        let use_lncc =
            matches!(m.kind, ChannelKind::Probability) || matches!(config.metric, Metric::Lncc);
        let value = if use_lncc {
            metric::lncc_metric(&f.volume, &warped[i], config.lncc_radius_voxels)?
        } else {
            let (bf, bm) = level.bounds[i];
            metric::JointHistogram::accumulate(&f.volume, &warped[i], level.mi_bins, None, bf, bm)?
                .mutual_information()
        };
        total += m.weight * value;
    }
    Ok(total)
}

/// Metric force with respect to the displacement, summed over channels.
fn displacement_force(
    level: &LevelData,
    config: &RegistrationConfig,
    geom: &Geometry,
    u: &[[f64; 3]],
    init: &AffineTransform,
    warped: &[Volume],
    moving_grads: &[[Volume; 3]],
) -> Result<Vec<[f64; 3]>> {
    let n = geom.len();
    let mut force = vec![[0.0f64; 3]; n];
    for (i, (f, m)) in level
        .fixed
        .channels()
        .iter()
        .zip(level.moving.channels())
        .enumerate()
    {
        let use_lncc =
            matches!(m.kind, ChannelKind::Probability) || matches!(config.metric, Metric::Lncc);
        let g_int = if use_lncc {
            metric::lncc_gradient(&f.volume, &warped[i], config.lncc_radius_voxels)?
        } else {
            let (bf, bm) = level.bounds[i];
            metric::mi_gradient(&f.volume, &warped[i], level.mi_bins, bf, bm)?
        };
        let grads = &moving_grads[i];
        let weight = m.weight;
        let a = &init.matrix;
        let [nx, ny, _] = geom.dims;
        let updates: Vec<[f64; 3]> = (0..n)
            .into_par_iter()
            .map(|idx| {
                let gi = g_int[idx];
                if gi == 0.0 {
                    return [0.0; 3];
                }
                let x = idx % nx;
                let y = (idx / nx) % ny;
                let z = idx / (nx * ny);
                let p = geom.voxel_to_world([x as f64, y as f64, z as f64]);
                let q = init.apply([p[0] + u[idx][0], p[1] + u[idx][1], p[2] + u[idx][2]]);
                let gm = [
                    grads[0].sample(q, crate::volume::Interp::Linear) as f64,
                    grads[1].sample(q, crate::volume::Interp::Linear) as f64,
                    grads[2].sample(q, crate::volume::Interp::Linear) as f64,
                ];
                // chain through the affine: d(M(A(x)))/dx = A^T grad M
                let mut out = [0.0f64; 3];
                for j in 0..3 {
                    let mut v = 0.0;
                    for k in 0..3 {
                        v += gm[k] * a[k][j];
                    }
                    out[j] = weight * gi * v;
                }
                out
            })
            .collect();
        for (fv, up) in force.iter_mut().zip(&updates) {
            fv[0] += up[0];
            fv[1] += up[1];
            fv[2] += up[2];
        }
    }
    Ok(force)
}

fn smooth_force(force: &[[f64; 3]], geom: &Geometry, sigma_mm: f64) -> Vec<[f64; 3]> {
    if sigma_mm <= 0.0 {
        return force.to_vec();
    }
    let mut comps = Vec::with_capacity(3);
    for c in 0..3 {
        let data: Vec<f32> = force.iter().map(|f| f[c] as f32).collect();
        let v = Volume::new(geom.clone(), data).expect("valid");
        comps.push(gaussian_smooth(&v, sigma_mm));
    }
    (0..geom.len())
        .map(|i| {
            [
                comps[0].data()[i] as f64,
                comps[1].data()[i] as f64,
                comps[2].data()[i] as f64,
            ]
        })
        .collect()
}

pub(super) fn optimize(
    fixed: &ChannelSet,
    moving: &ChannelSet,
    init: &AffineTransform,
    config: &RegistrationConfig,
) -> Result<DeformationField> {
    let mut base: Option<DeformationField> = None;

    for (li, &factor) in config.levels.iter().enumerate() {
        let level = LevelData::build(fixed, moving, factor, config.mi_bins)?;
        let geom = level.fixed.geometry().clone();
        let delta = config.ffd_spacing_mm[li];
        let tables = [
            AxisTable::build(geom.dims[0], geom.spacing[0], delta),
            AxisTable::build(geom.dims[1], geom.spacing[1], delta),
            AxisTable::build(geom.dims[2], geom.spacing[2], delta),
        ];
        let mut grid = ControlGrid::new(&geom, delta);

        // accumulated coarser-level displacement, resampled to this grid
        let base_l: Vec<[f64; 3]> = match &base {
            None => vec![[0.0; 3]; geom.len()],
            Some(field) => {
                let [nx, ny, _] = geom.dims;
                (0..geom.len())
                    .into_par_iter()
                    .map(|idx| {
                        let x = idx % nx;
                        let y = (idx / nx) % ny;
                        let z = idx / (nx * ny);
                        let p = geom.voxel_to_world([x as f64, y as f64, z as f64]);
                        field.displacement_at(p)
                    })
                    .collect()
            }
        };

        let moving_grads: Vec<[Volume; 3]> = level
            .moving
            .channels()
            .iter()
            .map(|c| world_gradient(&c.volume))
            .collect();

        let total_u = |grid: &ControlGrid| -> Vec<[f64; 3]> {
            let du = grid.eval_dense(&geom, &tables);
            du.iter()
                .zip(&base_l)
                .map(|(d, b)| [d[0] + b[0], d[1] + b[1], d[2] + b[2]])
                .collect()
        };

        let mut u = total_u(&grid);
        let mut warped = warp_channels(&level, &geom, &u, init);
        let mut obj = objective_of(&level, config, &warped)?;
        let mut step = config.step_mm;
        let sigma_reg = 0.5 * delta * config.smoothing_weight;
        let mut stall = 0usize;

        for _iter in 0..config.iterations {
            let force = displacement_force(&level, config, &geom, &u, init, &warped, &moving_grads)?;
            let force = smooth_force(&force, &geom, sigma_reg);
            let grad = grid.project(&force, &geom, &tables);
            let gmax = grad
                .iter()
                .map(|g| (g[0] * g[0] + g[1] * g[1] + g[2] * g[2]).sqrt())
                .fold(0.0f64, f64::max);
            if gmax < 1e-14 {
                break;
            }
            // backtracking keeps the objective non-decreasing
            let mut accepted = false;
            for _bt in 0..6 {
                let scale = step / gmax;
                let mut candidate = ControlGrid {
                    n: grid.n,
                    coef: grid.coef.clone(),
                };
                for (c, g) in candidate.coef.iter_mut().zip(&grad) {
                    c[0] += scale * g[0];
                    c[1] += scale * g[1];
                    c[2] += scale * g[2];
                }
                let u2 = total_u(&candidate);
                let warped2 = warp_channels(&level, &geom, &u2, init);
                let obj2 = objective_of(&level, config, &warped2)?;
                if obj2 > obj {
                    let gain = obj2 - obj;
                    grid = candidate;
                    u = u2;
                    warped = warped2;
                    obj = obj2;
                    step = (step * 1.2).min(config.step_mm * 2.0);
                    accepted = true;
                    if gain < config.tolerance * (obj.abs() + 1e-12) {
                        stall += 1;
                    } else {
                        stall = 0;
                    }
                    break;
                }
                step *= 0.5;
            }
            if !accepted || stall >= 2 {
                break;
            }
        }

        let final_u = total_u(&grid);
        let field = DeformationField::from_fn(&geom, |p| {
            let v = geom.world_to_voxel(p);
            // exact voxel lookup; from_fn walks the grid in order
            let idx = geom.index(
                v[0].round() as usize,
                v[1].round() as usize,
                v[2].round() as usize,
            );
            final_u[idx]
        });
        base = Some(field);
    }

    // resample to the full-resolution fixed grid and fold in the affine
    let full = fixed.geometry();
    let base = base.expect("at least one level");
    Ok(DeformationField::from_fn(full, |p| {
        let u = base.displacement_at(p);
        let q = init.apply([p[0] + u[0], p[1] + u[1], p[2] + u[2]]);
        [q[0] - p[0], q[1] - p[1], q[2] - p[2]]
    }))
}
