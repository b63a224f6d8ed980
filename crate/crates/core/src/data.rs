//! Procedural voxel objects, orthographic rendering on the pose grid, the
//! on-disk dataset and ingestion of arbitrary images.
//!
//! Layout of a dataset directory:
//!
//! ```text
//! manifest.tsv                      object_id  azimuth  elevation  split  path
//! views/<object_id>/<az>_<el>.ppm   rendered view
//! segs/<object_id>/<az>_<el>.ppm    edge map of the view's silhouette
//! ```

use std::fmt;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::imageops::FilterType;
use image::{ExtendedColorType, ImageEncoder, ImageReader};

use crate::error::{Error, Result};
use crate::geometry::{rotate_volume, rotation_between, Interp, Pose};
use crate::losses::edge_map;
use crate::tensor::rng::SeededRng;
use crate::tensor::{Scalar, Tensor};

/// Edge length of generated objects.
pub const OBJECT_GRID: usize = 24;

/// Channel-major image with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(channels: usize, height: usize, width: usize) -> Self {
        Image {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    pub fn get(&self, c: usize, r: usize, col: usize) -> f64 {
        self.data[(c * self.height + r) * self.width + col]
    }

    pub fn set(&mut self, c: usize, r: usize, col: usize, v: f64) {
        self.data[(c * self.height + r) * self.width + col] = v;
    }

    /// Interleaved 8-bit RGB; single-channel images are replicated.
    pub fn to_rgb8(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(3 * self.height * self.width);
        for r in 0..self.height {
            for col in 0..self.width {
                for c in 0..3 {
                    let v = self.get(c.min(self.channels - 1), r, col);
                    out.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
                }
            }
        }
        out
    }

    /// Interleaved 8-bit RGB to a `channels`-channel image (the first
    /// `channels` of R, G, B).
    pub fn from_rgb8(channels: usize, height: usize, width: usize, rgb: &[u8]) -> Self {
        let mut img = Image::new(channels, height, width);
        for r in 0..height {
            for col in 0..width {
                for c in 0..channels {
                    img.set(c, r, col, rgb[(r * width + col) * 3 + c] as f64 / 255.0);
                }
            }
        }
        img
    }

    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        stack_images(&[self]).expect("image buffer matches its shape")
    }

    /// Element `n` of an `[N, C, H, W]` tensor.
    pub fn from_tensor<T: Scalar>(t: &Tensor<T>, n: usize) -> Result<Self> {
        let [_, c, h, w] = *t.shape() else {
            return Err(Error::InvalidShape(format!("expected [N, C, H, W], got {:?}", t.shape())));
        };
        let plane = c * h * w;
        Ok(Image {
            channels: c,
            height: h,
            width: w,
            data: t.data()[n * plane..(n + 1) * plane].iter().map(|v| v.as_f64()).collect(),
        })
    }

    /// Mean absolute difference.
    pub fn l1(&self, other: &Image) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs()).sum::<f64>() / self.data.len() as f64
    }
}

/// `[N, C, H, W]` from equally sized images.
pub fn stack_images<T: Scalar>(images: &[&Image]) -> Result<Tensor<T>> {
    let first = images.first().ok_or_else(|| Error::InvalidShape("no images to stack".into()))?;
    let mut data = Vec::with_capacity(images.len() * first.data.len());
    for img in images {
        if (img.channels, img.height, img.width) != (first.channels, first.height, first.width) {
            return Err(Error::ShapeMismatch {
                op: "stack_images",
                lhs: vec![first.channels, first.height, first.width],
                rhs: vec![img.channels, img.height, img.width],
            });
        }
        data.extend(img.data.iter().map(|&v| T::of(v)));
    }
    Tensor::from_vec(&[images.len(), first.channels, first.height, first.width], data)
}

pub fn write_ppm(path: &Path, image: &Image) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    PnmEncoder::new(&mut w)
        .with_subtype(PnmSubtype::Pixmap(SampleEncoding::Binary))
        .write_image(&image.to_rgb8(), image.width as u32, image.height as u32, ExtendedColorType::Rgb8)
        .map_err(|e| Error::Decode {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
    w.flush().map_err(|e| Error::io(path, e))
}

fn decode_rgb8(path: &Path) -> Result<image::RgbImage> {
    let reader = ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?;
    let decoded = reader.decode().map_err(|e| Error::Decode {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    Ok(decoded.to_rgb8())
}

/// Read a PPM written by [`write_ppm`] keeping `channels` channels.
pub fn read_ppm(path: &Path, channels: usize) -> Result<Image> {
    let rgb = decode_rgb8(path)?;
    Ok(Image::from_rgb8(channels, rgb.height() as usize, rgb.width() as usize, rgb.as_raw()))
}

/// Decode any supported image (PPM, PNG), resize bilinearly to `size`×`size`
/// and scale to `[0, 1]`. No pose information is read.
pub fn load_external_image(path: &Path, size: usize) -> Result<Image> {
    let rgb = decode_rgb8(path)?;
    let rgb = if rgb.width() as usize == size && rgb.height() as usize == size {
        rgb
    } else {
        image::imageops::resize(&rgb, size as u32, size as u32, FilterType::Triangle)
    };
    Ok(Image::from_rgb8(3, size, size, rgb.as_raw()))
}

/// Colored occupancy grid indexed `(d, h, w)`: depth 0 faces the viewer at
/// pose (0, 0), row 0 is the top.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelObject {
    pub id: String,
    pub seed: u64,
    pub size: usize,
    pub occupancy: Vec<bool>,
    pub color: Vec<[f64; 3]>,
}

impl VoxelObject {
    pub fn empty(id: impl Into<String>, size: usize) -> Self {
        let n = size * size * size;
        VoxelObject {
            id: id.into(),
            seed: 0,
            size,
            occupancy: vec![false; n],
            color: vec![[0.0; 3]; n],
        }
    }

    fn index(&self, d: usize, h: usize, w: usize) -> usize {
        (d * self.size + h) * self.size + w
    }

    pub fn set(&mut self, d: usize, h: usize, w: usize, color: [f64; 3]) {
        let i = self.index(d, h, w);
        self.occupancy[i] = true;
        self.color[i] = color;
    }

    pub fn is_occupied(&self, d: usize, h: usize, w: usize) -> bool {
        self.occupancy[self.index(d, h, w)]
    }

    /// Fill the half-open box `d0..d1 × h0..h1 × w0..w1`.
    pub fn fill(&mut self, d: (usize, usize), h: (usize, usize), w: (usize, usize), color: [f64; 3]) {
        for z in d.0..d.1 {
            for y in h.0..h.1 {
                for x in w.0..w.1 {
                    self.set(z, y, x, color);
                }
            }
        }
    }

    pub fn occupied_fraction(&self) -> f64 {
        self.occupancy.iter().filter(|&&o| o).count() as f64 / self.occupancy.len() as f64
    }

    /// `[1, 4, D, D, D]`: occupancy then RGB.
    fn to_tensor(&self) -> Tensor<f64> {
        let n = self.occupancy.len();
        let mut data = vec![0.0; 4 * n];
        for i in 0..n {
            if self.occupancy[i] {
                data[i] = 1.0;
                for c in 0..3 {
                    data[(c + 1) * n + i] = self.color[i][c];
                }
            }
        }
        let s = self.size;
        Tensor::from_vec(&[1, 4, s, s, s], data).expect("object buffer matches its shape")
    }

    fn from_tensor(&self, t: &Tensor<f64>) -> VoxelObject {
        let n = self.occupancy.len();
        let x = t.data();
        let occupancy: Vec<bool> = (0..n).map(|i| x[i] > 0.5).collect();
        let color = (0..n)
            .map(|i| if occupancy[i] { [x[n + i], x[2 * n + i], x[3 * n + i]] } else { [0.0; 3] })
            .collect();
        VoxelObject {
            id: self.id.clone(),
            seed: self.seed,
            size: self.size,
            occupancy,
            color,
        }
    }

    /// Rotate about the grid centre with nearest sampling.
    pub fn rotated(&self, from: &Pose, to: &Pose) -> Result<VoxelObject> {
        let r = rotation_between(from, to);
        Ok(self.from_tensor(&rotate_volume(&self.to_tensor(), &r, Interp::Nearest)?))
    }
}

fn random_color(rng: &mut SeededRng) -> [f64; 3] {
    [0, 1, 2].map(|_| rng.uniform_range(0.2, 1.0))
}

/// A chair-like composite of boxes: seat, back, legs (four posts or a
/// pedestal) and usually one extra part on a random side. Everything stays
/// inside the region that survives any dataset-pose rotation unclipped.
pub fn generate_object(seed: u64, size: usize) -> VoxelObject {
    assert!(size >= 8, "object grid must be at least 8");
    let mut rng = SeededRng::derived(seed, "object");
    let mut obj = VoxelObject::empty(format!("seed{seed}"), size);
    obj.seed = seed;
    let lo = (size * 5).div_ceil(24);
    let hi = size - lo;
    let extent = hi - lo;
    let jit = (extent / 6).max(1);
    let j = |rng: &mut SeededRng| rng.range_inclusive(0, jit);

    // Seat footprint.
    let (x0, x1) = (lo + j(&mut rng), hi - j(&mut rng));
    let (z0, z1) = (lo + j(&mut rng), hi - j(&mut rng));
    let seat_top = lo + extent / 2 + rng.range_inclusive(0, 2) - 1;
    let seat_bottom = seat_top + 1 + rng.below(2);
    let seat_color = random_color(&mut rng);
    obj.fill((z0, z1), (seat_top, seat_bottom), (x0, x1), seat_color);

    // Legs down to the floor.
    let leg_color = if rng.bernoulli(0.5) { seat_color } else { random_color(&mut rng) };
    let t = 1 + rng.below(2);
    if rng.bernoulli(0.75) {
        for (zz, xx) in [(z0, x0), (z0, x1 - t), (z1 - t, x0), (z1 - t, x1 - t)] {
            obj.fill((zz, zz + t), (seat_bottom, hi), (xx, xx + t), leg_color);
        }
    } else {
        let (cz, cx) = ((z0 + z1) / 2, (x0 + x1) / 2);
        obj.fill((cz - t, cz + t), (seat_bottom, hi), (cx - t, cx + t), leg_color);
    }

    // Back at the far edge of the seat.
    let back_t = 1 + rng.below(2);
    let back_top = lo + rng.below(2);
    let inset = rng.below(2);
    let back_color = if rng.bernoulli(0.5) { seat_color } else { random_color(&mut rng) };
    obj.fill((z1 - back_t, z1), (back_top, seat_top), (x0 + inset, x1 - inset), back_color);

    // Extra part: an armrest on one side or a block on the seat.
    if rng.bernoulli(0.9) {
        let color = random_color(&mut rng);
        let arm_h = rng.range_inclusive(2, 3.min(seat_top - back_top).max(2));
        let top = seat_top.saturating_sub(arm_h).max(lo);
        if rng.bernoulli(0.5) {
            let side = if rng.bernoulli(0.5) { (x0, x0 + 1) } else { (x1 - 1, x1) };
            obj.fill((z0 + rng.below(2), z1 - back_t), (top, seat_top), side, color);
        } else {
            let w = 2 + rng.below(2);
            let xs = x0 + rng.below((x1 - x0).saturating_sub(w).max(1));
            let zs = z0 + rng.below((z1 - back_t - z0).saturating_sub(w).max(1));
            obj.fill((zs, zs + w), (top, seat_top), (xs, (xs + w).min(x1)), color);
        }
    }
    obj
}

/// Orthographic front-to-back render at `pose`: the first occupied voxel
/// along each depth ray gives the pixel, shaded linearly from 1.0 (nearest)
/// to 0.6 (farthest). Returns the view and the edge map of its silhouette.
pub fn render_view(obj: &VoxelObject, pose: &Pose, size: usize) -> Result<(Image, Image)> {
    if size < 16 {
        return Err(Error::InvalidShape(format!("render size {size} below 16")));
    }
    let rotated = obj.rotated(&Pose::origin(), pose)?;
    Ok(project(&rotated, size))
}

fn project(obj: &VoxelObject, size: usize) -> (Image, Image) {
    let g = obj.size;
    let mut view = Image::new(3, size, size);
    let mut silhouette = Image::new(1, size, size);
    let cell = |p: usize| (((p as f64 + 0.5) * g as f64) / size as f64).floor() as usize;
    for r in 0..size {
        let h = cell(r);
        for c in 0..size {
            let w = cell(c);
            if let Some(d) = (0..g).find(|&d| obj.is_occupied(d, h, w)) {
                let shade = 1.0 - 0.4 * d as f64 / (g - 1) as f64;
                let color = obj.color[obj.index(d, h, w)];
                for (ch, v) in color.iter().enumerate() {
                    view.set(ch, r, c, v * shade);
                }
                silhouette.set(0, r, c, 1.0);
            }
        }
    }
    (view, segment_of_silhouette(&silhouette))
}

fn segment_of_silhouette(silhouette: &Image) -> Image {
    let e = edge_map(&silhouette.to_tensor::<f64>()).expect("silhouette is a single image");
    Image::from_tensor(&e, 0).expect("edge map is [1, 1, S, S]")
}

/// Silhouette of a stored view (any channel lit) and its edge map.
pub fn segment_from_view(view: &Image) -> Image {
    let mut s = Image::new(1, view.height, view.width);
    for r in 0..view.height {
        for c in 0..view.width {
            if (0..view.channels).any(|ch| view.get(ch, r, c) > 0.0) {
                s.set(0, r, c, 1.0);
            }
        }
    }
    segment_of_silhouette(&s)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

/// One stored view, kept as 8-bit samples.
#[derive(Debug, Clone)]
pub struct ViewRecord {
    pub pose: Pose,
    pub path: String,
    rgb: Vec<u8>,
    seg: Vec<u8>,
    size: usize,
}

impl ViewRecord {
    pub fn image(&self) -> Image {
        Image::from_rgb8(3, self.size, self.size, &self.rgb)
    }

    pub fn segment(&self) -> Image {
        Image::from_rgb8(1, self.size, self.size, &self.seg)
    }
}

#[derive(Debug, Clone)]
pub struct ObjectRecord {
    pub id: String,
    pub split: Split,
    pub views: Vec<ViewRecord>,
}

impl ObjectRecord {
    pub fn view_at(&self, pose: &Pose) -> Option<&ViewRecord> {
        self.views.iter().find(|v| v.pose == *pose)
    }
}

/// A loaded dataset, all views in memory.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
    pub image_size: usize,
    /// Pose list of the first object, in manifest order.
    pub poses: Vec<Pose>,
    pub objects: Vec<ObjectRecord>,
}

pub const MANIFEST: &str = "manifest.tsv";
const MANIFEST_HEADER: &str = "object_id\tazimuth\televation\tsplit\tpath";

pub fn object_id(index: usize) -> String {
    format!("obj{index:04}")
}

/// Render `n_objects` objects at every pose, write the directory and return
/// the loaded dataset. Objects are split 80/20 by a seeded shuffle.
pub fn build_dataset(n_objects: usize, poses: &[Pose], image_size: usize, seed: u64, out: &Path) -> Result<Dataset> {
    if n_objects < 5 {
        return Err(Error::Config(format!("a dataset needs at least 5 objects, got {n_objects}")));
    }
    if poses.is_empty() {
        return Err(Error::Config("a dataset needs at least one pose".into()));
    }
    let mut order: Vec<usize> = (0..n_objects).collect();
    SeededRng::derived(seed, "split").shuffle(&mut order);
    let n_train = n_objects * 4 / 5;
    let mut split = vec![Split::Test; n_objects];
    for &i in &order[..n_train] {
        split[i] = Split::Train;
    }

    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut manifest = String::new();
    manifest.push_str(MANIFEST_HEADER);
    manifest.push('\n');
    for (i, &s) in split.iter().enumerate() {
        let id = object_id(i);
        let mut obj = generate_object(object_seed(seed, i), OBJECT_GRID);
        obj.id = id.clone();
        for pose in poses {
            let (view, seg) = render_view(&obj, pose, image_size)?;
            let rel = format!("views/{id}/{}.ppm", pose.label());
            write_ppm(&out.join(&rel), &view)?;
            write_ppm(&out.join(format!("segs/{id}/{}.ppm", pose.label())), &seg)?;
            manifest.push_str(&format!(
                "{id}\t{}\t{}\t{s}\t{rel}\n",
                crate::geometry::fmt_angle(pose.azimuth()),
                crate::geometry::fmt_angle(pose.elevation())
            ));
        }
        log::debug!("rendered {id} ({s})");
    }
    let path = out.join(MANIFEST);
    fs::write(&path, manifest).map_err(|e| Error::io(&path, e))?;
    Dataset::load(out)
}

/// Seed of object `index` in a dataset built with `seed`.
pub fn object_seed(seed: u64, index: usize) -> u64 {
    SeededRng::derived(seed, &format!("object-{index}")).below(usize::MAX) as u64
}

impl Dataset {
    pub fn load(root: &Path) -> Result<Dataset> {
        let path = root.join(MANIFEST);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let bad = |line: usize, message: String| Error::Dataset {
            path: path.clone(),
            message: format!("line {line}: {message}"),
        };
        let mut objects: Vec<ObjectRecord> = Vec::new();
        let mut image_size = None;
        for (n, line) in text.lines().enumerate() {
            if n == 0 && line == MANIFEST_HEADER || line.trim().is_empty() {
                continue;
            }
            let cols: Vec<&str> = line.split('\t').collect();
            let [id, az, el, split, rel] = cols[..] else {
                return Err(bad(n + 1, format!("expected 5 tab-separated fields, got {}", cols.len())));
            };
            let angle = |s: &str| s.parse::<f64>().map_err(|e| bad(n + 1, format!("angle `{s}`: {e}")));
            let pose = Pose::new(angle(az)?, angle(el)?).map_err(|e| bad(n + 1, e.to_string()))?;
            let split = match split {
                "train" => Split::Train,
                "test" => Split::Test,
                other => return Err(bad(n + 1, format!("unknown split `{other}`"))),
            };
            let view_path = root.join(rel);
            let seg_rel = rel.strip_prefix("views/").map(|r| format!("segs/{r}"));
            let seg_path = seg_rel
                .map(|r| root.join(r))
                .ok_or_else(|| bad(n + 1, format!("view path `{rel}` is not under views/")))?;
            let rgb = decode_rgb8(&view_path)?;
            let seg = decode_rgb8(&seg_path)?;
            let size = rgb.width() as usize;
            if rgb.height() as usize != size || seg.dimensions() != rgb.dimensions() {
                return Err(bad(n + 1, "views and segments must be equal squares".into()));
            }
            if *image_size.get_or_insert(size) != size {
                return Err(bad(n + 1, format!("image size {size} differs from earlier views")));
            }
            let record = ViewRecord {
                pose,
                path: rel.to_string(),
                rgb: rgb.as_raw().to_vec(),
                seg: seg.as_raw().to_vec(),
                size,
            };
            match objects.iter_mut().find(|o| o.id == id) {
                Some(o) if o.split != split => return Err(bad(n + 1, format!("object {id} appears in both splits"))),
                Some(o) => o.views.push(record),
                None => objects.push(ObjectRecord {
                    id: id.to_string(),
                    split,
                    views: vec![record],
                }),
            }
        }
        let image_size = image_size.ok_or_else(|| bad(0, "manifest lists no views".into()))?;
        let poses = objects[0].views.iter().map(|v| v.pose).collect();
        Ok(Dataset {
            root: root.to_path_buf(),
            image_size,
            poses,
            objects,
        })
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ObjectRecord> {
        self.objects.iter().filter(move |o| o.split == split)
    }

    pub fn object(&self, id: &str) -> Result<&ObjectRecord> {
        self.objects
            .iter()
            .find(|o| o.id == id)
            .ok_or_else(|| Error::UnknownObject(id.to_string()))
    }

    pub fn num_views(&self) -> usize {
        self.objects.iter().map(|o| o.views.len()).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::pose_grid;

    fn pose(a: f64, e: f64) -> Pose {
        Pose::new(a, e).unwrap()
    }

    #[test]
    fn objects_are_deterministic_and_bounded() {
        let a = generate_object(3, OBJECT_GRID);
        assert_eq!(a, generate_object(3, OBJECT_GRID));
        for seed in 0..100 {
            let f = generate_object(seed, OBJECT_GRID).occupied_fraction();
            assert!((0.01..=0.6).contains(&f), "seed {seed}: {f}");
        }
        let f = generate_object(1, 8).occupied_fraction();
        assert!((0.01..=0.6).contains(&f), "{f}");
    }

    #[test]
    fn distinct_seeds_give_distinct_objects() {
        let objs: Vec<Vec<bool>> = (0..100).map(|s| generate_object(s, OBJECT_GRID).occupancy).collect();
        for i in 0..objs.len() {
            for j in i + 1..objs.len() {
                assert_ne!(objs[i], objs[j], "seeds {i} and {j}");
            }
        }
    }

    #[test]
    fn empty_grid_renders_black() {
        let obj = VoxelObject::empty("e", 12);
        let (v, s) = render_view(&obj, &pose(40.0, 10.0), 16).unwrap();
        assert!(v.data.iter().all(|&x| x == 0.0));
        assert!(s.data.iter().all(|&x| x == 0.0));
        assert!(render_view(&obj, &pose(0.0, 0.0), 8).is_err());
    }

    #[test]
    fn centred_voxel_projects_to_centre() {
        let mut obj = VoxelObject::empty("c", 9);
        obj.set(4, 4, 4, [0.5, 0.6, 0.7]);
        for p in [pose(0.0, 0.0), pose(90.0, 0.0), pose(20.0, 10.0), pose(300.0, 20.0)] {
            let (v, _) = render_view(&obj, &p, 18).unwrap();
            for r in 0..18 {
                for c in 0..18 {
                    let lit = v.get(0, r, c) > 0.0;
                    // Pixels 8 and 9 map to the centre cell 4.
                    assert_eq!(lit, (8..10).contains(&r) && (8..10).contains(&c), "{p} ({r},{c})");
                }
            }
            // Voxel at depth 4 of 8 levels: shade 1 − 0.4·4/8.
            assert!((v.get(0, 8, 8) - 0.5 * 0.8).abs() < 1e-12);
        }
    }

    #[test]
    fn asymmetric_object_front_and_back_differ() {
        let obj = generate_object(11, OBJECT_GRID);
        let (a, _) = render_view(&obj, &pose(0.0, 0.0), 32).unwrap();
        let (b, _) = render_view(&obj, &pose(180.0, 0.0), 32).unwrap();
        assert!(a.l1(&b) > 0.0);
    }

    #[test]
    fn rendering_agrees_with_rotating_the_object() {
        let obj = generate_object(5, OBJECT_GRID);
        for a in [0.0, 90.0, 180.0, 270.0] {
            for b in [0.0, 90.0, 180.0, 270.0] {
                let turned = obj.rotated(&Pose::origin(), &pose(b, 0.0)).unwrap();
                let direct = render_view(&obj, &pose(a + b, 0.0), 32).unwrap();
                let via = render_view(&turned, &pose(a, 0.0), 32).unwrap();
                assert_eq!(direct.0, via.0, "a {a} b {b}");
            }
            // Rendering at a pose equals rendering the pre-rotated object at (0, 0).
            let turned = obj.rotated(&Pose::origin(), &pose(a, 0.0)).unwrap();
            assert_eq!(
                render_view(&obj, &pose(a, 0.0), 32).unwrap().0,
                render_view(&turned, &Pose::origin(), 32).unwrap().0
            );
        }
    }

    #[test]
    fn dataset_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let poses = pose_grid(4, &[0.0, 10.0]).unwrap();
        let ds = build_dataset(5, &poses, 16, 3, dir.path()).unwrap();
        assert_eq!(ds.num_views(), 40);
        assert_eq!(ds.split(Split::Train).count(), 4);
        assert_eq!(ds.poses, poses);
        let manifest = fs::read(dir.path().join(MANIFEST)).unwrap();
        let again = tempfile::tempdir().unwrap();
        build_dataset(5, &poses, 16, 3, again.path()).unwrap();
        assert_eq!(manifest, fs::read(again.path().join(MANIFEST)).unwrap());

        // Stored segments are the edge map of the stored silhouette.
        for obj in &ds.objects {
            for v in &obj.views {
                let regen = segment_from_view(&v.image());
                let stored = v.segment();
                assert!(regen.data.iter().zip(&stored.data).all(|(a, b)| (a - b).abs() <= 0.5 / 255.0 + 1e-12));
            }
        }
        assert!(matches!(ds.object("nope"), Err(Error::UnknownObject(_))));
        assert!(build_dataset(4, &poses, 16, 3, dir.path()).is_err());
    }

    #[test]
    fn external_image_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let (view, _) = render_view(&generate_object(2, OBJECT_GRID), &pose(20.0, 10.0), 32).unwrap();
        let path = dir.path().join("v.ppm");
        write_ppm(&path, &view).unwrap();
        let back = load_external_image(&path, 32).unwrap();
        assert!(back.data.iter().zip(&view.data).all(|(a, b)| (a - b).abs() <= 1.0 / 255.0));
        let small = load_external_image(&path, 16).unwrap();
        assert!(small.data.iter().all(|v| (0.0..=1.0).contains(v)));
        let err = load_external_image(&dir.path().join("missing.png"), 16).unwrap_err();
        assert!(err.to_string().contains("missing.png"));
        fs::write(dir.path().join("junk.png"), b"not an image").unwrap();
        assert!(load_external_image(&dir.path().join("junk.png"), 16).is_err());
    }
}
