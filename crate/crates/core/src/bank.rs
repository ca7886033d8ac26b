//! The sample bank: latent tiles drawn from the generator, their downsampled
//! renderings, and a k-means clustering of those renderings.

use rand::RngCore;
use rayon::prelude::*;

use crate::error::{arg_err, format_err, shape_err};
use crate::generator::{latent_from_seed, Generator, GeneratorSpec};
use crate::tensor::{avg_pool_to, squared_distance, Rng, Tensor};
use crate::wire::{sha256, Reader, Writer};
use crate::{Error, Result};

const TGB_MAGIC: &[u8; 4] = b"TGB1";
const TGB_VERSION: u32 = 1;
const UNCLUSTERED: u32 = u32::MAX;

pub const DEFAULT_SAMPLE_COUNT: usize = 100_000;
pub const DEFAULT_CLUSTERS: usize = 10;
pub const DEFAULT_REPRESENTATIVE_SIZE: usize = 16;
pub const DEFAULT_TOP_K: usize = 10;

/// One sampled latent tile.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: u32,
    /// Seed of the latent vector this tile was generated from.
    pub z_seed: u64,
    /// The full, uncropped `channels x 2^l x 2^l` activation tile.
    pub tile: Tensor,
    /// `3 x r x r` block-mean of the tile rendered on its own.
    pub representative: Tensor,
    pub cluster: Option<u32>,
}

impl Sample {
    /// Offset of the centred `crop x crop` window inside the tile.
    pub fn crop_offset(&self, crop: usize) -> usize {
        (self.tile.width() - crop) / 2
    }

    /// The centred `crop x crop` part of the tile that goes into a field.
    pub fn cropped(&self, crop: usize) -> Tensor {
        let o = self.crop_offset(crop);
        self.tile.crop(o, o, crop, crop).expect("crop within tile")
    }
}

/// Parameters of [`build_bank`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BankParams {
    pub level: usize,
    pub count: usize,
    pub crop: usize,
    pub representative_size: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleBank {
    generator_fingerprint: [u8; 32],
    level: usize,
    crop: usize,
    representative_size: usize,
    seed: u64,
    channels: usize,
    samples: Vec<Sample>,
    centers: Vec<Tensor>,
    members: Vec<Vec<u32>>,
}

/// Renders one sample exactly as the bank stores it.
pub fn render_sample(gen: &Generator, level: usize, r: usize, id: u32, z_seed: u64) -> Result<Sample> {
    let z = latent_from_seed(gen.spec(), z_seed);
    let tile = gen.g_a(&z, level)?;
    let image = gen.render_latent(&tile, level)?;
    let representative = avg_pool_to(&image, r)?;
    Ok(Sample { id, z_seed, tile, representative, cluster: None })
}

/// Samples `count` tiles. Latent seeds are the first `count` outputs of
/// `Rng::new(seed)`; rendering runs in parallel but the result depends only
/// on the inputs.
pub fn build_bank(gen: &Generator, params: BankParams) -> Result<SampleBank> {
    let spec = gen.spec();
    spec.check_split(params.level)?;
    let tile = GeneratorSpec::tile_size(params.level);
    if params.crop == 0 || params.crop > tile {
        return Err(arg_err!("crop {} outside [1, {tile}]", params.crop));
    }
    let out = spec.output_size();
    let r = params.representative_size;
    if r == 0 || r > out || !out.is_multiple_of(r) {
        return Err(arg_err!("representative size {r} must divide the {out}-pixel tile"));
    }
    if params.count > u32::MAX as usize - 1 {
        return Err(arg_err!("{} samples exceed the id space", params.count));
    }
    let mut rng = Rng::new(params.seed);
    let seeds: Vec<u64> = (0..params.count).map(|_| rng.next_u64()).collect();
    let samples = seeds
        .par_iter()
        .enumerate()
        .map(|(i, &s)| render_sample(gen, params.level, r, i as u32, s))
        .collect::<Result<Vec<_>>>()?;
    Ok(SampleBank {
        generator_fingerprint: gen.fingerprint(),
        level: params.level,
        crop: params.crop,
        representative_size: r,
        seed: params.seed,
        channels: spec.channels_at(params.level),
        samples,
        centers: Vec::new(),
        members: Vec::new(),
    })
}

/// Outcome of a k-means run.
#[derive(Clone, Debug, PartialEq)]
pub struct KMeans {
    pub assignments: Vec<usize>,
    pub centers: Vec<Vec<f32>>,
    /// Inertia after every assignment step.
    pub inertia: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

fn sq_dist64(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(x, y)| ((x - y) as f64).powi(2)).sum()
}

fn nearest(point: &[f32], centers: &[Vec<f32>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centers.iter().enumerate() {
        let d = sq_dist64(point, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

fn kmeans_plus_plus(points: &[&[f32]], k: usize, rng: &mut Rng) -> Vec<Vec<f32>> {
    let mut centers = vec![points[rng.below(points.len())].to_vec()];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist64(p, &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let target = rng.unit() * total;
            let mut acc = 0.0;
            let mut chosen = points.len() - 1;
            for (i, d) in d2.iter().enumerate() {
                acc += d;
                if acc > target {
                    chosen = i;
                    break;
                }
            }
            chosen
        } else {
            rng.below(points.len())
        };
        centers.push(points[pick].to_vec());
        let c = centers.last().unwrap();
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min(sq_dist64(p, c));
        }
    }
    centers
}

/// Lloyd's algorithm with k-means++ seeding.
///
/// Stops when an assignment step changes nothing or after `max_iters`
/// assignment steps. Clusters that empty out are re-seeded at the point
/// farthest from its center. On return every point is assigned to its
/// nearest center (ties to the lowest index).
pub fn kmeans(points: &[&[f32]], k: usize, max_iters: usize, rng: &mut Rng) -> Result<KMeans> {
    if k == 0 || k > points.len() {
        return Err(arg_err!("k = {k} with {} points", points.len()));
    }
    let dim = points[0].len();
    if points.iter().any(|p| p.len() != dim) {
        return Err(shape_err!("points of differing dimension"));
    }
    let mut centers = kmeans_plus_plus(points, k, rng);
    let mut assignments = vec![usize::MAX; points.len()];
    let mut inertia = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    let mut dists = vec![0.0f64; points.len()];
    for _ in 0..max_iters.max(1) {
        iterations += 1;
        let fresh: Vec<(usize, f64)> = points.par_iter().map(|p| nearest(p, &centers)).collect();
        let changed = fresh.iter().zip(&assignments).any(|((a, _), b)| a != b);
        for (i, (a, d)) in fresh.into_iter().enumerate() {
            assignments[i] = a;
            dists[i] = d;
        }
        inertia.push(dists.iter().sum());
        if !changed {
            converged = true;
            break;
        }
        if iterations == max_iters.max(1) {
            break;
        }

        let mut sums = vec![vec![0.0f64; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &a) in points.iter().zip(&assignments) {
            counts[a] += 1;
            for (s, v) in sums[a].iter_mut().zip(p.iter()) {
                *s += *v as f64;
            }
        }
        let mut taken = vec![false; points.len()];
        for j in 0..k {
            if counts[j] > 0 {
                centers[j] = sums[j].iter().map(|s| (s / counts[j] as f64) as f32).collect();
            } else {
                let far = (0..points.len())
                    .filter(|&i| !taken[i])
                    .max_by(|&a, &b| dists[a].total_cmp(&dists[b]).then(b.cmp(&a)))
                    .expect("k <= number of points");
                taken[far] = true;
                dists[far] = 0.0;
                centers[j] = points[far].to_vec();
            }
        }
    }
    Ok(KMeans { assignments, centers, inertia, iterations, converged })
}

impl SampleBank {
    pub fn generator_fingerprint(&self) -> &[u8; 32] {
        &self.generator_fingerprint
    }

    pub fn level(&self) -> usize {
        self.level
    }

    pub fn crop(&self) -> usize {
        self.crop
    }

    pub fn representative_size(&self) -> usize {
        self.representative_size
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn tile_size(&self) -> usize {
        GeneratorSpec::tile_size(self.level)
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn sample(&self, id: u32) -> Result<&Sample> {
        self.samples.get(id as usize).ok_or_else(|| arg_err!("no sample {id} in a bank of {}", self.samples.len()))
    }

    pub fn cluster_count(&self) -> usize {
        self.centers.len()
    }

    pub fn is_clustered(&self) -> bool {
        !self.centers.is_empty()
    }

    pub fn centers(&self) -> &[Tensor] {
        &self.centers
    }

    pub fn members(&self, cluster: usize) -> &[u32] {
        self.members.get(cluster).map(Vec::as_slice).unwrap_or(&[])
    }

    /// Clusters the representatives into `k` groups and stores the result.
    pub fn cluster(&mut self, k: usize, max_iters: usize, seed: u64) -> Result<KMeans> {
        if k > self.samples.len() {
            return Err(arg_err!("{k} clusters for {} samples", self.samples.len()));
        }
        let points: Vec<&[f32]> = self.samples.iter().map(|s| s.representative.values()).collect();
        let mut rng = Rng::new(seed);
        let result = kmeans(&points, k, max_iters, &mut rng)?;
        let r = self.representative_size;
        self.centers = result.centers.iter().map(|c| Tensor::new(3, r, r, c.clone())).collect::<Result<_>>()?;
        for (s, &a) in self.samples.iter_mut().zip(&result.assignments) {
            s.cluster = Some(a as u32);
        }
        self.rebuild_members();
        Ok(result)
    }

    fn rebuild_members(&mut self) {
        self.members = vec![Vec::new(); self.centers.len()];
        for s in &self.samples {
            if let Some(c) = s.cluster {
                self.members[c as usize].push(s.id);
            }
        }
    }

    /// Samples ranked by representative distance to `guidance_crop`,
    /// nearest first, ties by id; at most `k` entries.
    pub fn top_k_unary(&self, guidance_crop: &Tensor, k: usize) -> Result<Vec<(u32, f32)>> {
        let r = self.representative_size;
        if guidance_crop.shape() != (3, r, r) {
            return Err(shape_err!("guidance crop {:?}, expected (3, {r}, {r})", guidance_crop.shape()));
        }
        let g = guidance_crop.values();
        let mut ranked: Vec<(u32, f32)> =
            self.samples.iter().map(|s| (s.id, squared_distance(s.representative.values(), g).sqrt())).collect();
        let order = |a: &(u32, f32), b: &(u32, f32)| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0));
        let k = k.min(ranked.len());
        if k == 0 {
            return Ok(Vec::new());
        }
        if k < ranked.len() {
            ranked.select_nth_unstable_by(k - 1, order);
            ranked.truncate(k);
        }
        ranked.sort_unstable_by(order);
        Ok(ranked)
    }

    /// Uniform draw from the members of `cluster`.
    pub fn sample_from_cluster(&self, cluster: usize, rng: &mut Rng) -> Result<&Sample> {
        if cluster >= self.centers.len() {
            return Err(arg_err!("cluster {cluster} of {}", self.centers.len()));
        }
        let members = &self.members[cluster];
        if members.is_empty() {
            return Err(arg_err!("cluster {cluster} is empty"));
        }
        Ok(&self.samples[members[rng.below(members.len())] as usize])
    }

    /// Sum of squared representative distances to the assigned centers.
    pub fn inertia(&self) -> f64 {
        self.samples
            .iter()
            .filter_map(|s| s.cluster.map(|c| sq_dist64(s.representative.values(), self.centers[c as usize].values())))
            .sum()
    }

    /// `TGB1` layout, little-endian:
    ///
    /// ```text
    /// "TGB1" | version u32 = 1 | generator fingerprint [32]
    /// level u32 | crop u32 | r u32 | N u32 | k u32 | channels u32 | seed u64
    /// k centers: 3*r*r f32 each
    /// N records: z_seed u64 | cluster u32 (0xFFFFFFFF = none)
    ///            | tile channels*2^l*2^l f32 | representative 3*r*r f32
    /// ```
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::default();
        w.bytes(TGB_MAGIC);
        w.u32(TGB_VERSION);
        w.bytes(&self.generator_fingerprint);
        w.usize(self.level);
        w.usize(self.crop);
        w.usize(self.representative_size);
        w.usize(self.samples.len());
        w.usize(self.centers.len());
        w.usize(self.channels);
        w.u64(self.seed);
        for c in &self.centers {
            w.f32s(c.values());
        }
        for s in &self.samples {
            w.u64(s.z_seed);
            w.u32(s.cluster.unwrap_or(UNCLUSTERED));
            w.f32s(s.tile.values());
            w.f32s(s.representative.values());
        }
        w.buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut rd = Reader::new(bytes);
        rd.magic(TGB_MAGIC)?;
        let version = rd.u32("version")?;
        if version != TGB_VERSION {
            return Err(format_err!("unsupported TGB version {version}"));
        }
        let generator_fingerprint: [u8; 32] = rd.take(32, "fingerprint")?.try_into().unwrap();
        let level = rd.usize("level")?;
        let crop = rd.usize("crop")?;
        let r = rd.usize("representative size")?;
        let n = rd.usize("sample count")?;
        let k = rd.usize("cluster count")?;
        let channels = rd.usize("channels")?;
        let seed = rd.u64("seed")?;
        if !(2..=20).contains(&level) || crop == 0 || crop > 1 << level || r == 0 || channels == 0 {
            return Err(format_err!("implausible header: level {level}, crop {crop}, r {r}, channels {channels}"));
        }
        if k > n {
            return Err(format_err!("{k} clusters for {n} samples"));
        }
        let t = 1usize << level;
        let rep_len = 3 * r * r;
        let record_len = 12 + 4 * (channels * t * t + rep_len);
        let centers_len = k * rep_len * 4;
        let body = centers_len + n * record_len;
        if rd.remaining() < centers_len {
            return Err(format_err!("cluster centers truncated"));
        }
        if rd.remaining() < body {
            let complete = (rd.remaining() - centers_len) / record_len;
            return Err(format_err!("sample record {complete}: truncated"));
        }
        if rd.remaining() > body {
            return Err(format_err!("{} trailing bytes", rd.remaining() - body));
        }
        let centers = (0..k)
            .map(|j| {
                let v = rd.f32s(rep_len, &format!("center {j}"))?;
                Tensor::new(3, r, r, v)
            })
            .collect::<Result<Vec<_>>>()?;
        let mut samples = Vec::with_capacity(n);
        for i in 0..n {
            let rec = |e: Error| format_err!("sample record {i}: {e}");
            let z_seed = rd.u64("z seed").map_err(rec)?;
            let cluster = rd.u32("cluster").map_err(rec)?;
            let cluster = match cluster {
                UNCLUSTERED => None,
                c if (c as usize) < k => Some(c),
                c => return Err(format_err!("sample record {i}: cluster {c} with only {k} clusters")),
            };
            if k > 0 && cluster.is_none() {
                return Err(format_err!("sample record {i}: unclustered sample in a clustered bank"));
            }
            let tile = rd.f32s(channels * t * t, "tile").map_err(rec)?;
            let rep = rd.f32s(rep_len, "representative").map_err(rec)?;
            samples.push(Sample {
                id: i as u32,
                z_seed,
                tile: Tensor::new(channels, t, t, tile)?,
                representative: Tensor::new(3, r, r, rep)?,
                cluster,
            });
        }
        rd.finish()?;
        let mut bank = SampleBank {
            generator_fingerprint,
            level,
            crop,
            representative_size: r,
            seed,
            channels,
            samples,
            centers,
            members: Vec::new(),
        };
        bank.rebuild_members();
        Ok(bank)
    }

    /// Loads a bank and checks it was sampled from `gen`.
    pub fn from_bytes_for(bytes: &[u8], gen: &Generator) -> Result<Self> {
        let bank = Self::from_bytes(bytes)?;
        bank.check_generator(gen)?;
        Ok(bank)
    }

    pub fn check_generator(&self, gen: &Generator) -> Result<()> {
        let fp = gen.fingerprint();
        if fp != self.generator_fingerprint {
            return Err(Error::Compatibility(format!(
                "bank was sampled from generator {}, not {}",
                hex(&self.generator_fingerprint),
                hex(&fp)
            )));
        }
        let spec = gen.spec();
        if spec.check_split(self.level).is_err() || spec.channels_at(self.level) != self.channels {
            return Err(Error::Compatibility(format!("bank level {} does not fit the generator", self.level)));
        }
        Ok(())
    }

    /// SHA-256 of the `TGB1` serialisation.
    pub fn fingerprint(&self) -> [u8; 32] {
        sha256(&self.to_bytes())
    }
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
