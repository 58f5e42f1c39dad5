//! Modality payloads and the convolutional encoders that turn them into
//! token-embedding sequences.
//!
//! Images, video frames and audio grids pass through small stride-2 conv
//! stacks, get flattened spatially and are linearly projected to the model
//! width. Encoders train from random initialization.

use crate::error::{Error, Result};
use crate::kernels::conv_out_len;
use crate::params::Session;
use crate::scalar::Scalar;
use crate::tape::Var;
use crate::tensor::Tensor;

/// RGB image with pixel values in [0, 1], stored as channel planes (CHW).
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ImageGrid {
    pub height: usize,
    pub width: usize,
    data: Vec<f32>,
}

impl ImageGrid {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Shape(format!(
                "image dims must be positive, got {height}x{width}"
            )));
        }
        if data.len() != 3 * height * width {
            return Err(Error::Shape(format!(
                "image buffer has {} floats, expected 3*{height}*{width}",
                data.len()
            )));
        }
        for (i, v) in data.iter().enumerate() {
            if !v.is_finite() || !(0.0..=1.0).contains(v) {
                return Err(Error::Validity(format!(
                    "image value {v} at flat index {i} outside [0, 1]"
                )));
            }
        }
        Ok(ImageGrid { height, width, data })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        ImageGrid {
            height,
            width,
            data: vec![0.0; 3 * height * width],
        }
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f32; 3] {
        let plane = self.height * self.width;
        let at = y * self.width + x;
        [self.data[at], self.data[plane + at], self.data[2 * plane + at]]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [f32; 3]) {
        let plane = self.height * self.width;
        let at = y * self.width + x;
        self.data[at] = rgb[0];
        self.data[plane + at] = rgb[1];
        self.data[2 * plane + at] = rgb[2];
    }
}

/// A clip of equally shaped frames; at least one.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct VideoClip {
    pub frames: Vec<ImageGrid>,
}

impl VideoClip {
    pub fn new(frames: Vec<ImageGrid>) -> Result<Self> {
        let first = frames
            .first()
            .ok_or_else(|| Error::Shape("video clip has no frames".to_string()))?;
        let (h, w) = (first.height, first.width);
        for (i, f) in frames.iter().enumerate() {
            if f.height != h || f.width != w {
                return Err(Error::Shape(format!(
                    "frame {i} is {}x{}, frame 0 is {h}x{w}",
                    f.height, f.width
                )));
            }
        }
        Ok(VideoClip { frames })
    }
}

/// Synthetic time-frequency grid; values finite, not range-restricted.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AudioGrid {
    pub time_steps: usize,
    pub freq_bins: usize,
    data: Vec<f32>,
}

impl AudioGrid {
    pub fn new(time_steps: usize, freq_bins: usize, data: Vec<f32>) -> Result<Self> {
        if time_steps == 0 || freq_bins == 0 {
            return Err(Error::Shape(format!(
                "audio dims must be positive, got {time_steps}x{freq_bins}"
            )));
        }
        if data.len() != time_steps * freq_bins {
            return Err(Error::Shape(format!(
                "audio buffer has {} floats, expected {time_steps}*{freq_bins}",
                data.len()
            )));
        }
        for (i, v) in data.iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::Validity(format!(
                    "audio value at flat index {i} is not finite"
                )));
            }
        }
        Ok(AudioGrid {
            time_steps,
            freq_bins,
            data,
        })
    }

    pub fn zeros(time_steps: usize, freq_bins: usize) -> Self {
        AudioGrid {
            time_steps,
            freq_bins,
            data: vec![0.0; time_steps * freq_bins],
        }
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn at(&self, t: usize, f: usize) -> f32 {
        self.data[t * self.freq_bins + f]
    }

    pub fn set(&mut self, t: usize, f: usize, v: f32) {
        self.data[t * self.freq_bins + f] = v;
    }
}

/// Channel progression of a stride-2 conv stack.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConvStack {
    pub channels: Vec<usize>,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl Default for ConvStack {
    fn default() -> Self {
        ConvStack::default_stack()
    }
}

impl ConvStack {
    pub fn default_stack() -> Self {
        ConvStack {
            channels: vec![16, 32, 64],
            kernel: 3,
            stride: 2,
            padding: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() || self.channels.contains(&0) {
            return Err(Error::Config(format!(
                "conv stack channels must be non-empty and positive: {:?}",
                self.channels
            )));
        }
        if self.kernel == 0 || self.stride == 0 {
            return Err(Error::Config(
                "conv kernel and stride must be positive".to_string(),
            ));
        }
        Ok(())
    }

    /// Output width of the stack, i.e. the channel count fed to projection.
    pub fn out_channels(&self) -> usize {
        *self.channels.last().expect("validated non-empty")
    }

    /// Spatial extent after all blocks.
    pub fn out_extent(&self, mut len: usize) -> usize {
        for _ in &self.channels {
            len = conv_out_len(len, self.kernel, self.stride, self.padding);
        }
        len
    }
}

/// How video frames aggregate over time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemporalMode {
    /// Per-frame 2D convs, then mean over fixed windows of frames.
    MeanPool,
    /// A true (small) 3D convolution stack.
    Conv3d,
}

/// Everything the modality encoders need from the run configuration.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderSettings {
    pub image: ConvStack,
    pub video: ConvStack,
    pub audio: ConvStack,
    pub video_window: usize,
    pub video_temporal: TemporalMode,
    pub audio_freq_bins: usize,
}

impl Default for EncoderSettings {
    fn default() -> Self {
        EncoderSettings {
            image: ConvStack::default_stack(),
            video: ConvStack::default_stack(),
            audio: ConvStack::default_stack(),
            video_window: 2,
            video_temporal: TemporalMode::MeanPool,
            audio_freq_bins: 64,
        }
    }
}

impl EncoderSettings {
    pub fn validate(&self) -> Result<()> {
        self.image.validate()?;
        self.video.validate()?;
        self.audio.validate()?;
        if self.video_window == 0 {
            return Err(Error::Config("video window must be positive".to_string()));
        }
        if self.audio_freq_bins == 0 {
            return Err(Error::Config("audio freq bins must be positive".to_string()));
        }
        Ok(())
    }

    pub fn image_token_count(&self, h: usize, w: usize) -> usize {
        self.image.out_extent(h) * self.image.out_extent(w)
    }

    pub fn video_token_count(&self, frames: usize, h: usize, w: usize) -> usize {
        match self.video_temporal {
            TemporalMode::MeanPool => {
                let groups = frames.div_ceil(self.video_window);
                groups * self.video.out_extent(h) * self.video.out_extent(w)
            }
            TemporalMode::Conv3d => {
                let mut t = frames;
                for _ in &self.video.channels {
                    t = conv_out_len(t, 2, 2, 0);
                }
                t * self.video.out_extent(h) * self.video.out_extent(w)
            }
        }
    }

    pub fn audio_token_count(&self, time_steps: usize) -> usize {
        self.audio.out_extent(time_steps) * self.audio.out_extent(self.audio_freq_bins)
    }
}

/// Parameter names and shapes of one conv stack plus its projection head.
pub fn stack_census(
    prefix: &str,
    proj_name: &str,
    stack: &ConvStack,
    in_channels: usize,
    d_model: usize,
    temporal_3d: bool,
) -> Vec<(String, Vec<usize>)> {
    let mut out = Vec::new();
    let mut cin = in_channels;
    for (i, &cout) in stack.channels.iter().enumerate() {
        let wshape = if temporal_3d {
            vec![cout, cin, 2, stack.kernel, stack.kernel]
        } else {
            vec![cout, cin, stack.kernel, stack.kernel]
        };
        out.push((format!("{prefix}.block{i}.conv.weight"), wshape));
        out.push((format!("{prefix}.block{i}.conv.bias"), vec![cout]));
        cin = cout;
    }
    out.push((format!("proj.{proj_name}.weight"), vec![cin, d_model]));
    out.push((format!("proj.{proj_name}.bias"), vec![d_model]));
    out
}

fn leaf_from_f32<S: Scalar>(sess: &mut Session<'_, S>, shape: Vec<usize>, data: &[f32]) -> Result<Var> {
    let t = Tensor::from_fn(shape, |i| S::from_f32_lossy(data[i]));
    let t = Tensor::new(t.shape().to_vec(), t.into_data())?;
    Ok(sess.tape.leaf(t))
}

/// Applies one conv stack (conv + GELU per block) to [cin, h, w].
fn run_stack<S: Scalar>(
    sess: &mut Session<'_, S>,
    prefix: &str,
    stack: &ConvStack,
    mut x: Var,
) -> Result<Var> {
    for i in 0..stack.channels.len() {
        let w = sess.param(&format!("{prefix}.block{i}.conv.weight"))?;
        let b = sess.param(&format!("{prefix}.block{i}.conv.bias"))?;
        let y = sess.tape.conv2d(x, w, b, stack.stride, stack.padding)?;
        x = sess.tape.gelu(y)?;
    }
    Ok(x)
}

/// Flattens a [c, h, w] feature map to [h*w, c] token rows.
fn flatten_tokens<S: Scalar>(sess: &mut Session<'_, S>, x: Var) -> Result<Var> {
    let shape = sess.tape.value(x).shape().to_vec();
    let c = shape[0];
    let spatial: usize = shape[1..].iter().product();
    let flat = sess.tape.reshape(x, vec![c, spatial])?;
    sess.tape.transpose2(flat)
}

fn project<S: Scalar>(sess: &mut Session<'_, S>, proj_name: &str, tokens: Var) -> Result<Var> {
    let w = sess.param(&format!("proj.{proj_name}.weight"))?;
    let b = sess.param(&format!("proj.{proj_name}.bias"))?;
    let y = sess.tape.matmul(tokens, w)?;
    sess.tape.add_bias(y, b)
}

/// Image -> [n_tokens, d_model].
pub fn encode_image<S: Scalar>(
    sess: &mut Session<'_, S>,
    settings: &EncoderSettings,
    img: &ImageGrid,
) -> Result<Var> {
    let x = leaf_from_f32(sess, vec![3, img.height, img.width], img.data())?;
    let feat = run_stack(sess, "image_enc", &settings.image, x)?;
    let tokens = flatten_tokens(sess, feat)?;
    project(sess, "image", tokens)
}

/// Video clip -> [n_tokens, d_model].
pub fn encode_video<S: Scalar>(
    sess: &mut Session<'_, S>,
    settings: &EncoderSettings,
    clip: &VideoClip,
) -> Result<Var> {
    match settings.video_temporal {
        TemporalMode::MeanPool => {
            let mut frame_tokens = Vec::with_capacity(clip.frames.len());
            for frame in &clip.frames {
                let x = leaf_from_f32(sess, vec![3, frame.height, frame.width], frame.data())?;
                let feat = run_stack(sess, "video_enc", &settings.video, x)?;
                frame_tokens.push(flatten_tokens(sess, feat)?);
            }
            let mut groups = Vec::new();
            for chunk in frame_tokens.chunks(settings.video_window) {
                let mut acc = chunk[0];
                for &t in &chunk[1..] {
                    acc = sess.tape.add(acc, t)?;
                }
                let mean = sess
                    .tape
                    .scale(acc, S::from_f64_lossy(1.0 / chunk.len() as f64))?;
                groups.push(mean);
            }
            let all = sess.tape.concat_rows(&groups)?;
            project(sess, "video", all)
        }
        TemporalMode::Conv3d => {
            let f = clip.frames.len();
            let (h, w) = (clip.frames[0].height, clip.frames[0].width);
            let mut buf = vec![0.0f32; 3 * f * h * w];
            // Repack per-frame CHW planes into [c, f, h, w].
            for (fi, frame) in clip.frames.iter().enumerate() {
                for c in 0..3 {
                    let src = &frame.data()[c * h * w..(c + 1) * h * w];
                    let dst = &mut buf[(c * f + fi) * h * w..(c * f + fi + 1) * h * w];
                    dst.copy_from_slice(src);
                }
            }
            let mut x = leaf_from_f32(sess, vec![3, f, h, w], &buf)?;
            let stack = &settings.video;
            for i in 0..stack.channels.len() {
                let wv = sess.param(&format!("video_enc.block{i}.conv.weight"))?;
                let bv = sess.param(&format!("video_enc.block{i}.conv.bias"))?;
                let y = sess
                    .tape
                    .conv3d(x, wv, bv, 2, stack.stride, 0, stack.padding)?;
                x = sess.tape.gelu(y)?;
            }
            let shape = sess.tape.value(x).shape().to_vec();
            let c = shape[0];
            let rest: usize = shape[1..].iter().product();
            let flat = sess.tape.reshape(x, vec![c, rest])?;
            let tokens = sess.tape.transpose2(flat)?;
            project(sess, "video", tokens)
        }
    }
}

/// Audio grid -> [n_tokens, d_model].
pub fn encode_audio<S: Scalar>(
    sess: &mut Session<'_, S>,
    settings: &EncoderSettings,
    audio: &AudioGrid,
) -> Result<Var> {
    if audio.freq_bins != settings.audio_freq_bins {
        return Err(Error::Config(format!(
            "audio grid has {} freq bins, encoder configured for {}",
            audio.freq_bins, settings.audio_freq_bins
        )));
    }
    let x = leaf_from_f32(
        sess,
        vec![1, audio.time_steps, audio.freq_bins],
        audio.data(),
    )?;
    let feat = run_stack(sess, "audio_enc", &settings.audio, x)?;
    let tokens = flatten_tokens(sess, feat)?;
    project(sess, "audio", tokens)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamStore;
    use crate::rng::CounterRng;

    fn tiny_settings() -> EncoderSettings {
        EncoderSettings {
            image: ConvStack {
                channels: vec![4, 6],
                kernel: 3,
                stride: 2,
                padding: 1,
            },
            video: ConvStack {
                channels: vec![4, 6],
                kernel: 3,
                stride: 2,
                padding: 1,
            },
            audio: ConvStack {
                channels: vec![4, 6],
                kernel: 3,
                stride: 2,
                padding: 1,
            },
            video_window: 2,
            video_temporal: TemporalMode::MeanPool,
            audio_freq_bins: 8,
        }
    }

    fn store_for<S: crate::scalar::Scalar>(
        census: &[(String, Vec<usize>)],
        seed: u64,
    ) -> ParamStore<S> {
        let mut rng = CounterRng::new(seed, 0);
        let mut store = ParamStore::new();
        for (name, shape) in census {
            let t = Tensor::from_fn(shape.clone(), |_| {
                S::from_f64_lossy(0.2 * (rng.next_f64() - 0.5))
            });
            store.insert(name.clone(), t);
        }
        store
    }

    fn image_census(settings: &EncoderSettings, d_model: usize) -> Vec<(String, Vec<usize>)> {
        stack_census("image_enc", "image", &settings.image, 3, d_model, false)
    }

    #[test]
    fn default_image_shape_arithmetic() {
        let s = EncoderSettings::default();
        // Three stride-2 blocks: 32 -> 16 -> 8 -> 4, so 16 tokens.
        assert_eq!(s.image_token_count(32, 32), 16);
        // 8-frame clip with window 2: 4 groups of 16 tokens.
        assert_eq!(s.video_token_count(8, 32, 32), 64);
        // 64x64 audio grid: 8x8 = 64 tokens.
        assert_eq!(s.audio_token_count(64), 64);
    }

    #[test]
    fn zero_image_is_deterministic() {
        let settings = tiny_settings();
        let census = image_census(&settings, 5);
        let store: ParamStore<f32> = store_for(&census, 1);
        let img = ImageGrid::zeros(8, 8);
        let run = || {
            let mut sess = Session::inference(&store);
            let v = encode_image(&mut sess, &settings, &img).unwrap();
            sess.tape.value(v).data().to_vec()
        };
        assert_eq!(run(), run());
        let mut sess = Session::inference(&store);
        let v = encode_image(&mut sess, &settings, &img).unwrap();
        assert_eq!(
            sess.tape.value(v).shape(),
            &[settings.image_token_count(8, 8), 5]
        );
    }

    #[test]
    fn image_encoder_passes_finite_difference_check() {
        let settings = tiny_settings();
        let census = image_census(&settings, 5);
        let store: ParamStore<f64> = store_for(&census, 2);
        let mut rng = CounterRng::new(3, 0);
        let img = ImageGrid::new(
            8,
            8,
            (0..3 * 64).map(|_| rng.next_f32()).collect(),
        )
        .unwrap();
        let report = crate::gradcheck::check_store(
            &store,
            |sess| {
                let v = encode_image(sess, &settings, &img)?;
                let sq = sess.tape.mul(v, v)?;
                sess.tape.sum_all(sq)
            },
            6,
            1e-4,
            77,
        )
        .unwrap();
        assert!(
            report.max_rel_err < 1e-4,
            "encoder gradcheck failed: {report:?}"
        );
    }

    #[test]
    fn video_single_frame_equals_image_path_with_shared_weights() {
        let settings = tiny_settings();
        let d = 5;
        let mut store: ParamStore<f32> = store_for(&image_census(&settings, d), 4);
        // Mirror the image weights into the video namespace.
        let pairs: Vec<(String, String)> = image_census(&settings, d)
            .iter()
            .map(|(n, _)| {
                (
                    n.clone(),
                    n.replace("image_enc", "video_enc").replace("proj.image", "proj.video"),
                )
            })
            .collect();
        for (img_name, vid_name) in pairs {
            let t = store.get(&img_name).unwrap().clone();
            store.insert(vid_name, t);
        }
        let mut rng = CounterRng::new(5, 0);
        let frame = ImageGrid::new(8, 8, (0..3 * 64).map(|_| rng.next_f32()).collect()).unwrap();
        let clip = VideoClip::new(vec![frame.clone()]).unwrap();

        let mut s1 = Session::inference(&store);
        let vi = encode_image(&mut s1, &settings, &frame).unwrap();
        let img_out = s1.tape.value(vi).data().to_vec();

        let mut s2 = Session::inference(&store);
        let vv = encode_video(&mut s2, &settings, &clip).unwrap();
        let vid_out = s2.tape.value(vv).data().to_vec();
        assert_eq!(img_out, vid_out);
    }

    #[test]
    fn identical_frames_mean_pool_to_repeats() {
        let settings = tiny_settings();
        let census = stack_census("video_enc", "video", &settings.video, 3, 5, false);
        let store: ParamStore<f32> = store_for(&census, 6);
        let mut rng = CounterRng::new(7, 0);
        let frame = ImageGrid::new(8, 8, (0..3 * 64).map(|_| rng.next_f32()).collect()).unwrap();

        let one = VideoClip::new(vec![frame.clone()]).unwrap();
        let eight = VideoClip::new(vec![frame.clone(); 8]).unwrap();

        let mut s1 = Session::inference(&store);
        let v1 = encode_video(&mut s1, &settings, &one).unwrap();
        let single = s1.tape.value(v1).data().to_vec();

        let mut s8 = Session::inference(&store);
        let v8 = encode_video(&mut s8, &settings, &eight).unwrap();
        let rep = s8.tape.value(v8).data().to_vec();

        assert_eq!(rep.len(), 4 * single.len());
        for g in 0..4 {
            let group = &rep[g * single.len()..(g + 1) * single.len()];
            for (a, b) in group.iter().zip(&single) {
                assert!((a - b).abs() < 1e-5, "group {g}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn conv3d_mode_shapes_and_gradients() {
        let mut settings = tiny_settings();
        settings.video_temporal = TemporalMode::Conv3d;
        let census = stack_census("video_enc", "video", &settings.video, 3, 4, true);
        let store: ParamStore<f64> = store_for(&census, 8);
        let mut rng = CounterRng::new(9, 0);
        let frames: Vec<ImageGrid> = (0..4)
            .map(|_| ImageGrid::new(8, 8, (0..3 * 64).map(|_| rng.next_f32()).collect()).unwrap())
            .collect();
        let clip = VideoClip::new(frames).unwrap();

        let mut sess = Session::inference(&store);
        let v = encode_video(&mut sess, &settings, &clip).unwrap();
        assert_eq!(
            sess.tape.value(v).shape(),
            &[settings.video_token_count(4, 8, 8), 4]
        );

        let report = crate::gradcheck::check_store(
            &store,
            |sess| {
                let v = encode_video(sess, &settings, &clip)?;
                let sq = sess.tape.mul(v, v)?;
                sess.tape.sum_all(sq)
            },
            4,
            1e-4,
            88,
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-4, "{report:?}");
    }

    #[test]
    fn audio_shapes_freq_mismatch_and_scaling() {
        let settings = tiny_settings();
        let census = stack_census("audio_enc", "audio", &settings.audio, 1, 5, false);
        let store: ParamStore<f32> = store_for(&census, 10);

        let bad = AudioGrid::zeros(8, 16);
        let mut sess = Session::inference(&store);
        assert_eq!(
            encode_audio(&mut sess, &settings, &bad).unwrap_err().kind(),
            "config"
        );

        let mut rng = CounterRng::new(11, 0);
        let grid = AudioGrid::new(8, 8, (0..64).map(|_| rng.next_f32()).collect()).unwrap();
        let mut s1 = Session::inference(&store);
        let v1 = encode_audio(&mut s1, &settings, &grid).unwrap();
        assert_eq!(s1.tape.value(v1).shape(), &[settings.audio_token_count(8), 5]);
        let out1 = s1.tape.value(v1).data().to_vec();

        // Doubling the grid must change the output (no hidden normalization).
        let doubled =
            AudioGrid::new(8, 8, grid.data().iter().map(|v| v * 2.0).collect()).unwrap();
        let mut s2 = Session::inference(&store);
        let v2 = encode_audio(&mut s2, &settings, &doubled).unwrap();
        let out2 = s2.tape.value(v2).data().to_vec();
        assert_ne!(out1, out2);
    }

    #[test]
    fn payload_validation() {
        assert!(ImageGrid::new(2, 2, vec![0.5; 12]).is_ok());
        assert!(ImageGrid::new(2, 2, vec![0.5; 11]).is_err());
        assert!(ImageGrid::new(2, 2, vec![1.5; 12]).is_err());
        assert!(ImageGrid::new(0, 2, vec![]).is_err());
        assert!(VideoClip::new(vec![]).is_err());
        assert!(
            VideoClip::new(vec![ImageGrid::zeros(2, 2), ImageGrid::zeros(2, 3)]).is_err()
        );
        assert!(AudioGrid::new(2, 2, vec![f32::NAN; 4]).is_err());
    }
}
