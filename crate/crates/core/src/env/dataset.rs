use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{EnvConfig, Frame, FramePair, SpriteWorld, FRAME_PIXELS, FRAME_SIDE, NUM_ACTIONS};
use crate::error::{Error, Result};
use crate::nn::Activation;
use crate::tensor::Scalar;

pub const DATASET_MAGIC: &[u8; 5] = b"SPRT1";

const FRAME_BYTES: u64 = (FRAME_PIXELS * 4) as u64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub config: EnvConfig,
    pub seed: u64,
    pub frame_count: u64,
    pub height: usize,
    pub width: usize,
}

/// Records a uniform-random-policy stream of `n_frames` consecutive frames.
///
/// Layout: `SPRT1`, u32 LE header length, JSON header, then `n_frames`
/// row-major 84×84 little-endian f32 blocks. Episodes that end are reset
/// with the next seed in sequence and the stream continues.
pub fn collect_random(config: &EnvConfig, seed: u64, n_frames: usize, path: &Path) -> Result<DatasetHeader> {
    if n_frames < 2 {
        return Err(Error::Argument(format!("n_frames must be at least 2, got {n_frames}")));
    }
    let mut env = SpriteWorld::new(config.clone())?;
    let header = DatasetHeader {
        config: config.clone(),
        seed,
        frame_count: n_frames as u64,
        height: FRAME_SIDE,
        width: FRAME_SIDE,
    };
    let json = serde_json::to_vec(&header)?;

    let tmp = path.with_extension("partial");
    let file = File::create(&tmp).map_err(|e| Error::io(format!("creating {}", tmp.display()), e))?;
    let mut out = BufWriter::new(file);
    let werr = |e| Error::io(format!("writing {}", tmp.display()), e);
    out.write_all(DATASET_MAGIC).map_err(werr)?;
    out.write_all(&(json.len() as u32).to_le_bytes()).map_err(werr)?;
    out.write_all(&json).map_err(werr)?;

    let mut policy = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_a11c_e000_0001);
    let mut episode = 0u64;
    let mut frame = env.reset(seed);
    write_frame(&mut out, &frame).map_err(werr)?;
    for _ in 1..n_frames {
        let t = env.step(policy.random_range(0..NUM_ACTIONS))?;
        frame = t.obs.curr;
        write_frame(&mut out, &frame).map_err(werr)?;
        if t.done {
            episode += 1;
            env.reset(seed.wrapping_add(episode));
        }
    }
    out.flush().map_err(werr)?;
    drop(out);
    std::fs::rename(&tmp, path).map_err(|e| Error::io(format!("renaming to {}", path.display()), e))?;
    Ok(header)
}

fn write_frame(out: &mut impl Write, f: &Frame) -> std::io::Result<()> {
    let mut buf = Vec::with_capacity(FRAME_PIXELS * 4);
    for v in &f.pixels {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    out.write_all(&buf)
}

/// Read-side handle; frames are fetched by seeking.
#[derive(Debug)]
pub struct Dataset {
    path: PathBuf,
    header: DatasetHeader,
    data_offset: u64,
    reader: BufReader<File>,
}

impl Dataset {
    pub fn open(path: &Path) -> Result<Self> {
        let ctx = || format!("reading dataset {}", path.display());
        let file = File::open(path).map_err(|e| Error::io(ctx(), e))?;
        let file_len = file.metadata().map_err(|e| Error::io(ctx(), e))?.len();
        let mut reader = BufReader::new(file);
        let mut magic = [0u8; 5];
        reader.read_exact(&mut magic).map_err(|e| Error::io(ctx(), e))?;
        if &magic != DATASET_MAGIC {
            return Err(Error::Incompatible {
                path: path.to_path_buf(),
                reason: "missing SPRT1 magic".into(),
            });
        }
        let mut len = [0u8; 4];
        reader.read_exact(&mut len).map_err(|e| Error::io(ctx(), e))?;
        let mut json = vec![0u8; u32::from_le_bytes(len) as usize];
        reader.read_exact(&mut json).map_err(|e| Error::io(ctx(), e))?;
        let header: DatasetHeader = serde_json::from_slice(&json)?;
        let data_offset = 9 + json.len() as u64;
        if header.height != FRAME_SIDE || header.width != FRAME_SIDE {
            return Err(Error::Incompatible {
                path: path.to_path_buf(),
                reason: format!("frames are {}x{}", header.height, header.width),
            });
        }
        if file_len != data_offset + header.frame_count * FRAME_BYTES {
            return Err(Error::Integrity {
                path: path.to_path_buf(),
                reason: format!(
                    "expected {} frames, file holds {} bytes of frame data",
                    header.frame_count,
                    file_len.saturating_sub(data_offset)
                ),
            });
        }
        Ok(Self {
            path: path.to_path_buf(),
            header,
            data_offset,
            reader,
        })
    }

    pub fn header(&self) -> &DatasetHeader {
        &self.header
    }

    pub fn frame_count(&self) -> usize {
        self.header.frame_count as usize
    }

    /// Consecutive frames paired with stride 1.
    pub fn num_pairs(&self) -> usize {
        self.frame_count().saturating_sub(1)
    }

    pub fn frame(&mut self, i: usize) -> Result<Frame> {
        if i >= self.frame_count() {
            return Err(Error::Argument(format!("frame {i} out of range ({})", self.frame_count())));
        }
        let ctx = || format!("reading dataset {}", self.path.display());
        self.reader
            .seek(SeekFrom::Start(self.data_offset + i as u64 * FRAME_BYTES))
            .map_err(|e| Error::io(ctx(), e))?;
        let mut buf = vec![0u8; FRAME_BYTES as usize];
        self.reader.read_exact(&mut buf).map_err(|e| Error::io(ctx(), e))?;
        Ok(Frame {
            pixels: buf
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect(),
        })
    }

    pub fn pair(&mut self, i: usize) -> Result<FramePair> {
        if i >= self.num_pairs() {
            return Err(Error::Argument(format!("pair {i} out of range ({})", self.num_pairs())));
        }
        Ok(FramePair {
            prev: self.frame(i)?,
            curr: self.frame(i + 1)?,
        })
    }

    pub fn pairs(&mut self, idx: &[usize]) -> Result<Vec<FramePair>> {
        idx.iter().map(|&i| self.pair(i)).collect()
    }
}

/// Uniform sampling over pair indices without replacement, reshuffled with
/// its own seed at every epoch boundary.
#[derive(Clone, Debug)]
pub struct PairSampler {
    order: Vec<usize>,
    pos: usize,
    epoch: u64,
    rng: ChaCha8Rng,
}

impl PairSampler {
    pub fn new(num_pairs: usize, seed: u64) -> Result<Self> {
        if num_pairs == 0 {
            return Err(Error::Argument("dataset holds no pairs".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut order: Vec<usize> = (0..num_pairs).collect();
        order.shuffle(&mut rng);
        Ok(Self {
            order,
            pos: 0,
            epoch: 0,
            rng,
        })
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    pub fn next_batch(&mut self, size: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(size);
        while out.len() < size {
            if self.pos == self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.pos = 0;
                self.epoch += 1;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

/// Stacks pairs into an `n×2×84×84` network input, older frame in channel 0.
pub fn pairs_to_activation<T: Scalar>(pairs: &[FramePair]) -> Activation<T> {
    let mut data = Vec::with_capacity(pairs.len() * 2 * FRAME_PIXELS);
    for p in pairs {
        data.extend(p.prev.pixels.iter().map(|&v| T::lit(v as f64)));
        data.extend(p.curr.pixels.iter().map(|&v| T::lit(v as f64)));
    }
    Activation {
        n: pairs.len(),
        c: 2,
        h: FRAME_SIDE,
        w: FRAME_SIDE,
        data,
    }
}
